//! Local optimizers: projected BFGS for bound-constrained minimization and a
//! monotone backtracking ascent used by the EM loop.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when `max_i |g_i|·max(|x_i|, 1) / max(|f|, 1)` over the projected
    /// gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change falls below this.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-8,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub proj_grad_norm: f64,
}

fn project(x: &mut DVector<f64>, lower: &[Option<f64>]) {
    for (xi, lb) in x.iter_mut().zip(lower) {
        if let Some(l) = lb {
            if *xi < *l {
                *xi = *l;
            }
        }
    }
}

fn rel_grad(x: &DVector<f64>, pg: &DVector<f64>, f: f64) -> f64 {
    let m = pg.iter().zip(x.iter()).map(|(g, v)| g.abs() * v.abs().max(1.0)).fold(0.0, f64::max);
    m / f.abs().max(1.0)
}

fn projected_grad(x: &DVector<f64>, g: &DVector<f64>, lower: &[Option<f64>]) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| match lower[i] {
        Some(l) if x[i] <= l && g[i] > 0.0 => 0.0,
        _ => g[i],
    })
}

/// Minimize `f` subject to `x_i ≥ lower_i` where given.
///
/// `fg` returns the objective and its gradient. Bound-active coordinates are
/// frozen for the quasi-Newton step and the step is projected back onto the
/// feasible box.
pub fn projected_bfgs<F>(
    mut fg: F,
    x0: &DVector<f64>,
    lower: &[Option<f64>],
    opts: &BfgsOptions,
) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    let mut x = x0.clone();
    project(&mut x, lower);
    let (mut f, mut g) = fg(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut pg = projected_grad(&x, &g, lower);
    let mut pg_norm = pg.amax();
    if !f.is_finite() {
        return BfgsResult {
            x,
            f,
            iterations: 0,
            converged: false,
            proj_grad_norm: f64::NAN,
        };
    }
    // Steepest-descent restarts use `-scale·∇f`; `fresh` marks that `h` holds no curvature.
    let mut scale = 1.0 / pg_norm.max(1.0);
    let mut fresh = true;
    for it in 1..=opts.max_iter {
        if rel_grad(&x, &pg, f) < opts.grad_tol {
            return BfgsResult {
                x,
                f,
                iterations: it - 1,
                converged: true,
                proj_grad_norm: pg_norm,
            };
        }
        let active: Vec<bool> = (0..n)
            .map(|i| matches!(lower[i], Some(l) if x[i] <= l && g[i] > 0.0))
            .collect();
        let mut dir = if fresh { -&pg * scale } else { -(&h * &pg) };
        for i in 0..n {
            if active[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&pg) >= 0.0 {
            h = DMatrix::identity(n, n) * scale;
            dir = -&pg * scale;
            fresh = true;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = &x + &dir * step;
            project(&mut xn, lower);
            let (fnew, gnew) = fg(&xn);
            let decrease = g.dot(&(&xn - &x));
            if fnew.is_finite() && fnew <= f + 1e-4 * decrease.min(0.0) {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let stalled = match &accepted {
            None => true,
            Some((_, fnew, _)) => *fnew >= f,
        };
        if stalled {
            if fresh {
                let converged = rel_grad(&x, &pg, f) < opts.grad_tol.sqrt();
                return BfgsResult {
                    x,
                    f,
                    iterations: it,
                    converged,
                    proj_grad_norm: pg_norm,
                };
            }
            // the quasi-Newton model predicts no decrease f can resolve
            let pred = 0.5 * dir.dot(&pg).abs();
            if pred <= 1e-12 * f.abs().max(1.0) {
                return BfgsResult {
                    x,
                    f,
                    iterations: it,
                    converged: true,
                    proj_grad_norm: pg_norm,
                };
            }
            h = DMatrix::identity(n, n) * scale;
            fresh = true;
            continue;
        }
        let (xn, fnew, gnew) = accepted.expect("checked above");
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        let df = (f - fnew).abs();
        x = xn;
        let f_old = f;
        f = fnew;
        g = gnew;
        pg = projected_grad(&x, &g, lower);
        pg_norm = pg.amax();
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            scale = sy / y.dot(&y);
            if fresh {
                h = DMatrix::identity(n, n) * scale;
            }
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            h = &a * &h * a.transpose() + &s * s.transpose() * rho;
            fresh = false;
        }
        if df <= opts.f_tol * (1.0 + f_old.abs()) && rel_grad(&x, &pg, f) < opts.grad_tol.sqrt() {
            return BfgsResult {
                x,
                f,
                iterations: it,
                converged: true,
                proj_grad_norm: pg_norm,
            };
        }
    }
    let converged = rel_grad(&x, &pg, f) < opts.grad_tol;
    BfgsResult {
        x,
        f,
        iterations: opts.max_iter,
        converged,
        proj_grad_norm: pg_norm,
    }
}

/// Outcome of one monotone ascent step.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentStep {
    pub x: DVector<f64>,
    pub value: f64,
    pub step: f64,
    pub accepted: bool,
}

/// One gradient-ascent step from `x` with backtracking: the step starts at
/// `step0` and is halved until the objective does not decrease. If no trial
/// improves, `x` is returned unchanged.
pub fn ascent_step<F>(
    mut value: F,
    x: &DVector<f64>,
    f_x: f64,
    grad: &DVector<f64>,
    step0: f64,
    max_halvings: usize,
) -> AscentStep
where
    F: FnMut(&DVector<f64>) -> Option<f64>,
{
    let mut step = step0;
    for _ in 0..=max_halvings {
        let xn = x + grad * step;
        if let Some(v) = value(&xn) {
            if v.is_finite() && v >= f_x {
                return AscentStep {
                    x: xn,
                    value: v,
                    step,
                    accepted: true,
                };
            }
        }
        step *= 0.5;
    }
    AscentStep {
        x: x.clone(),
        value: f_x,
        step: 0.0,
        accepted: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rosenbrock_unconstrained() {
        let r = projected_bfgs(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = dvector![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a)
                ];
                (f, g)
            },
            &dvector![-1.2, 1.0],
            &[None, None],
            &BfgsOptions::default(),
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bound_becomes_active() {
        let r = projected_bfgs(
            |x| ((x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2), dvector![2.0 * (x[0] + 1.0), 2.0 * (x[1] - 2.0)]),
            &dvector![3.0, 0.0],
            &[Some(0.0), None],
            &BfgsOptions::default(),
        );
        assert!(r.converged);
        assert_eq!(r.x[0], 0.0);
        assert!((r.x[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn near_collinear_quadratic_with_offset() {
        // two columns nearly parallel, condition number near 1e8
        let a = [[1.0, 1.0], [1.0, 1.0 + 1e-4]];
        let b = [1.0, 2.0];
        let fg = |x: &DVector<f64>| {
            let r = [a[0][0] * x[0] + a[0][1] * x[1] - b[0], a[1][0] * x[0] + a[1][1] * x[1] - b[1]];
            let f = -5e3 + 1e3 * (r[0] * r[0] + r[1] * r[1]);
            let g = dvector![
                2e3 * (a[0][0] * r[0] + a[1][0] * r[1]),
                2e3 * (a[0][1] * r[0] + a[1][1] * r[1])
            ];
            (f, g)
        };
        let r = projected_bfgs(fg, &dvector![0.0, 0.0], &[None, None], &BfgsOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] + 9999.0).abs() < 1e-2 * 9999.0 && (r.x[1] - 1e4).abs() < 1e-2 * 1e4, "{:?}", r.x);
    }

    #[test]
    fn ascent_rejects_worse_points() {
        let s = ascent_step(|x| Some(-x[0] * x[0]), &dvector![0.0], 0.0, &dvector![1.0], 1.0, 5);
        assert!(!s.accepted);
        assert_eq!(s.x[0], 0.0);
    }
}
