//! Quasi-Newton ascent over a subset of coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Stop once the free gradient is this small in the sup norm.
    pub grad_tol: f64,
    /// First trial step length along each search direction.
    pub step_init: f64,
    /// No coordinate moves further than this in one iteration.
    pub max_coord_step: f64,
}

/// Iterations in a row without measurable progress before giving up.
const STALL_LIMIT: usize = 3;
/// A stalled run still counts as converged below this gradient size, which
/// is where rounding in large-sample objectives usually leaves it.
const STALL_GRAD_TOL: f64 = 1e-6;

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions { max_iters: 500, grad_tol: 1e-8, step_init: 1.0, max_coord_step: 5.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub x: DVector<f64>,
    pub value: f64,
    /// Sup norm of the gradient on the free coordinates at `x`.
    pub grad_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn free_part(g: &DVector<f64>, free: &[usize]) -> DVector<f64> {
    DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]))
}

/// Maximizes `f` over the coordinates in `free`, holding the rest of `x0`
/// fixed. `f` returns the value and the full gradient; an `Err` marks the
/// trial point as infeasible and the line search backs off from it.
///
/// Returns the best point visited.
pub fn bfgs_ascent<F>(x0: &DVector<f64>, free: &[usize], mut f: F, opts: &AscentOptions) -> Result<AscentResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let (mut fx, grad) = f(x0)?;
    let mut x = x0.clone();
    let mut g = free_part(&grad, free);
    let m = free.len();
    let mut best = AscentResult { x: x.clone(), value: fx, grad_inf: g.amax(), iterations: 0, converged: false };
    if m == 0 || g.amax() <= opts.grad_tol {
        best.converged = true;
        return Ok(best);
    }
    // Approximates the inverse of the negated Hessian.
    let mut inv = DMatrix::<f64>::identity(m, m);
    let mut fresh = true;
    let mut stalled = 0;
    for iter in 1..=opts.max_iters {
        let mut dir = &inv * &g;
        if dir.dot(&g) <= 0.0 {
            inv = DMatrix::identity(m, m);
            dir = g.clone();
            fresh = true;
        }
        let biggest = dir.amax();
        if biggest > opts.max_coord_step {
            dir *= opts.max_coord_step / biggest;
        }
        let slope = dir.dot(&g);
        let mut t = if fresh { opts.step_init.min(1.0 / g.amax().max(1e-300)).max(1e-8) } else { opts.step_init };
        let mut accepted = None;
        let mut fallback: Option<(DVector<f64>, f64, DVector<f64>)> = None;
        for _ in 0..60 {
            let mut trial = x.clone();
            for (j, &i) in free.iter().enumerate() {
                trial[i] += t * dir[j];
            }
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() {
                    let gt = free_part(&gt, free);
                    if ft >= fx + 1e-4 * t * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                    // Close to the optimum the Armijo test drowns in rounding;
                    // accept a point that is not worse and has a smaller gradient.
                    let noise = 1e-13 * (1.0 + fx.abs());
                    if ft >= fx - noise && gt.amax() < g.amax() && fallback.is_none() {
                        fallback = Some((trial, ft, gt));
                    }
                }
            }
            t *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted.or(fallback) else {
            if fresh {
                best.iterations = iter;
                best.converged = best.grad_inf <= STALL_GRAD_TOL.max(opts.grad_tol);
                return Ok(best);
            }
            inv = DMatrix::identity(m, m);
            fresh = true;
            continue;
        };
        let s = free_part(&(&xn - &x), free);
        let moved = free.iter().any(|&i| (xn[i] - x[i]).abs() > 1e-10 * (1.0 + x[i].abs()));
        let gained = fxn > fx + 1e-14 * (1.0 + fx.abs());
        stalled = if moved || gained { 0 } else { stalled + 1 };
        // Curvature pair for the minimization of -f.
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                inv = DMatrix::identity(m, m) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let iy = &inv * &y;
            let yiy = y.dot(&iy);
            inv += (&s * s.transpose()) * (rho * rho * yiy + rho) - (&iy * s.transpose() + &s * iy.transpose()) * rho;
            fresh = false;
        }
        x = xn;
        fx = fxn;
        g = gn;
        if fx > best.value || (fx == best.value && g.amax() < best.grad_inf) {
            best = AscentResult { x: x.clone(), value: fx, grad_inf: g.amax(), iterations: iter, converged: false };
        }
        best.iterations = iter;
        if g.amax() <= opts.grad_tol {
            if fx >= best.value - 1e-13 * (1.0 + fx.abs()) {
                best = AscentResult { x, value: fx, grad_inf: g.amax(), iterations: iter, converged: true };
            }
            return Ok(best);
        }
        if stalled >= STALL_LIMIT {
            best.converged = best.grad_inf <= STALL_GRAD_TOL.max(opts.grad_tol);
            return Ok(best);
        }
    }
    Ok(best)
}
