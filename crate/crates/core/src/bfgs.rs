//! Dense BFGS on the inverse Hessian with a backtracking (Armijo) line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop once the gradient norm drops below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 500,
            c1: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step satisfying sufficient decrease was found, even along the
    /// steepest descent direction. The best iterate is returned.
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// Minimises `f`, which returns the value and gradient, or `None` where the
/// objective is undefined (treated as +inf by the line search). `on_accept`
/// sees every accepted iterate, starting with `x0`.
pub fn minimize<F, C>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions, mut on_accept: C) -> Option<BfgsOutcome>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    C: FnMut(&DVector<f64>, f64),
{
    let n = x0.len();
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut evaluations = 1;
    on_accept(&x, fx);
    // symmetric inverse Hessian; only the upper triangle is kept current
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    // H g for the current H and g, kept up to date without a second product
    let mut hg = g.clone();
    let mut hg_new = DVector::<f64>::zeros(n);

    while iterations < opts.max_iters {
        if g.norm() < opts.grad_tol {
            termination = Termination::Converged;
            break;
        }
        let mut dir = -&hg;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h.fill_with_identity();
            fresh = true;
            hg.copy_from(&g);
            dir = -&g;
            slope = -g.norm_squared();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &dir * step;
            evaluations += 1;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + opts.c1 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if fresh {
                termination = Termination::LineSearchFailure;
                break;
            }
            // retry along steepest descent
            h.fill_with_identity();
            hg.copy_from(&g);
            fresh = true;
            continue;
        };

        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        x = xn;
        fx = fn_;
        g = gn;
        iterations += 1;
        on_accept(&x, fx);

        if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
            let hy = if fresh {
                // scale the initial inverse Hessian
                let scale = sy / yv.norm_squared();
                h.fill_with_identity();
                h *= scale;
                fresh = false;
                hg_new = &g * scale;
                &yv * scale
            } else {
                upper_mul(&h, &g, &mut hg_new);
                &hg_new - &hg
            };
            let rho = 1.0 / sy;
            let c = rho * rho * yv.dot(&hy) + rho;
            // H <- H - rho (s hy' + hy s') + c s s', one column at a time
            let (sv, hv) = (s.as_slice(), hy.as_slice());
            for (j, col) in h.as_mut_slice().chunks_exact_mut(n).enumerate() {
                let (a, b) = (c * sv[j] - rho * hv[j], -rho * sv[j]);
                for ((hij, si), hyi) in col[..=j].iter_mut().zip(sv).zip(hv) {
                    *hij += si * a + hyi * b;
                }
            }
            let (sg, hyg) = (s.dot(&g), hy.dot(&g));
            hg.copy_from(&hg_new);
            hg.axpy(c * sg - rho * hyg, &s, 1.0);
            hg.axpy(-rho * sg, &hy, 1.0);
        } else {
            upper_mul(&h, &g, &mut hg);
        }
    }
    if termination == Termination::MaxIterations && g.norm() < opts.grad_tol {
        termination = Termination::Converged;
    }
    Some(BfgsOutcome {
        grad_norm: g.norm(),
        x,
        value: fx,
        iterations,
        evaluations,
        termination,
    })
}

/// `out = H v` for symmetric `H` stored in its upper triangle.
fn upper_mul(h: &DMatrix<f64>, v: &DVector<f64>, out: &mut DVector<f64>) {
    let n = v.len();
    let (v, out) = (v.as_slice(), out.as_mut_slice());
    out.fill(0.0);
    for (j, col) in h.as_slice().chunks_exact(n).enumerate() {
        let vj = v[j];
        let mut acc = 0.0;
        for ((hij, vi), oi) in col[..j].iter().zip(&v[..j]).zip(out[..j].iter_mut()) {
            *oi += hij * vj;
            acc += hij * vi;
        }
        out[j] += acc + col[j] * vj;
    }
}
