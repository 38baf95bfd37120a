//! 3D thin-plate spline with kernel `U(r) = r` plus an affine part.

use nalgebra::{DMatrix, Matrix4x3};

use crate::error::{Error, Result};
use crate::skeleton::Point3;

/// Interpolating spline mapping `src[i]` exactly onto `dst[i]`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centre: Point3,
    controls: Vec<Point3>,
    /// Kernel weights, one row per control.
    weights: DMatrix<f64>,
    affine: Matrix4x3<f64>,
}

impl ThinPlateSpline {
    /// Solves the interpolation system. Fewer than four controls, or
    /// collinear/coplanar ones, leave the affine part underdetermined; the
    /// minimum-norm solution is used then, which still interpolates.
    pub fn fit(src: &[Point3], dst: &[Point3]) -> Result<Self> {
        if src.is_empty() || src.len() != dst.len() {
            return Err(Error::SingularSystem(format!(
                "need matching non-empty control sets, got {} and {}",
                src.len(),
                dst.len()
            )));
        }
        let n = src.len();
        let centre = src.iter().sum::<Point3>() / n as f64;
        let controls: Vec<Point3> = src.iter().map(|p| p - centre).collect();
        let mut l = DMatrix::<f64>::zeros(n + 4, n + 4);
        for i in 0..n {
            for j in 0..i {
                let r = (controls[i] - controls[j]).norm();
                l[(i, j)] = r;
                l[(j, i)] = r;
            }
            l[(i, n)] = 1.0;
            l[(n, i)] = 1.0;
            for k in 0..3 {
                l[(i, n + 1 + k)] = controls[i][k];
                l[(n + 1 + k, i)] = controls[i][k];
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(n + 4, 3);
        for i in 0..n {
            let d = dst[i] - src[i];
            for k in 0..3 {
                rhs[(i, k)] = d[k];
            }
        }

        let scale = rhs.amax().max(1.0);
        let residual_ok =
            |sol: &DMatrix<f64>| sol.iter().all(|v| v.is_finite()) && (&l * sol - &rhs).amax() <= 1e-9 * scale;
        let solution = match l.clone().lu().solve(&rhs) {
            Some(sol) if residual_ok(&sol) => sol,
            _ => {
                let svd = l.clone().svd(true, true);
                let eps = 1e-10 * svd.singular_values.max();
                let sol = svd.solve(&rhs, eps).map_err(|e| Error::SingularSystem(e.to_string()))?;
                if !residual_ok(&sol) {
                    return Err(Error::SingularSystem(
                        "control points cannot be interpolated (coincident sources?)".into(),
                    ));
                }
                sol
            }
        };
        Ok(Self {
            centre,
            controls,
            weights: solution.rows(0, n).into_owned(),
            affine: solution.fixed_view::<4, 3>(n, 0).into_owned(),
        })
    }

    pub fn warp(&self, q: &Point3) -> Point3 {
        let c = q - self.centre;
        let mut d = self.affine.row(0).transpose()
            + self.affine.row(1).transpose() * c.x
            + self.affine.row(2).transpose() * c.y
            + self.affine.row(3).transpose() * c.z;
        for (i, p) in self.controls.iter().enumerate() {
            let r = (c - p).norm();
            if r > 0.0 {
                d += self.weights.row(i).transpose() * r;
            }
        }
        q + d
    }
}

pub fn tps_warp_3d(control_src: &[Point3], control_dst: &[Point3], queries: &[Point3]) -> Result<Vec<Point3>> {
    let tps = ThinPlateSpline::fit(control_src, control_dst)?;
    Ok(queries.iter().map(|q| tps.warp(q)).collect())
}
