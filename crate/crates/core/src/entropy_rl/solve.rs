use nalgebra::DVector;

use super::{
    expected_next_f, f_from_g, g_update, linearize_dynamics, policy_update, shift_reward,
    terminal_f, AuxQuantities, GaussianPolicy, LinearizationPoint, QuadraticF, QuadraticG,
};
use crate::error::{check_dim, Error, Result};
use crate::model_core::{reward_coefficients, ModelParams};
use crate::scalar::{c, Real};

/// Per-step solution of a finite-horizon backward pass, indexed by `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct BackwardPass<T: Real = f64> {
    pub g: Vec<QuadraticG<T>>,
    pub f: Vec<QuadraticF<T>>,
    pub policies: Vec<GaussianPolicy<T>>,
    /// `None` at the terminal step, where the action is fixed.
    pub aux: Vec<Option<AuxQuantities<T>>>,
}

impl<T: Real> BackwardPass<T> {
    pub fn horizon(&self) -> usize {
        self.f.len() - 1
    }
}

/// Finite-horizon recursion over `points[0..=T]`.
///
/// The terminal action offset `delta_a_terminal` is `a_T − ā_T`. At `T` the
/// G-function is the shifted reward and the policy slot holds the prior.
pub fn backward_pass<T: Real>(
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    points: &[LinearizationPoint<T>],
    delta_a_terminal: &DVector<T>,
) -> Result<BackwardPass<T>> {
    if points.is_empty() {
        return Err(Error::InvalidParameter(
            "backward pass needs at least the terminal point".into(),
        ));
    }
    check_dim("prior action dimension", params.n_a(), prior.n_a())?;
    let horizon = points.len() - 1;
    let coeffs = reward_coefficients(params);
    let wrap = |t: usize| move |e: Error| Error::BackwardPass { t, source: Box::new(e) };

    let shifted_t = shift_reward(&coeffs, &points[horizon]);
    let f_t = terminal_f(&shifted_t, delta_a_terminal).map_err(wrap(horizon))?;
    let g_t = QuadraticG {
        g_aa: shifted_t.r_aa.clone(),
        g_yy: shifted_t.r_yy.clone(),
        g_ay: shifted_t.r_ay.clone(),
        g_a: shifted_t.r_a.clone(),
        g_y: shifted_t.r_y.clone(),
        g0: shifted_t.r_bar,
    };

    let mut gs = vec![g_t];
    let mut fs = vec![f_t];
    let mut pols = vec![prior.clone()];
    let mut auxs = vec![None];
    for t in (0..horizon).rev() {
        let mut point = points[t].clone();
        point.y_bar_next = points[t + 1].y_bar.clone();
        let step = || -> Result<_> {
            let lin = linearize_dynamics(params, &point)?;
            let h = expected_next_f(fs.last().unwrap(), &lin)?;
            let g = g_update(&shift_reward(&coeffs, &point), &h, params.gamma_disc);
            let (f, aux) = f_from_g(&g, prior, params.beta, &point)?;
            let pol = policy_update(&g, prior, params.beta, &point)?;
            Ok((g, f, pol, aux))
        };
        let (g, f, pol, aux) = step().map_err(wrap(t))?;
        gs.push(g);
        fs.push(f);
        pols.push(pol);
        auxs.push(Some(aux));
    }
    gs.reverse();
    fs.reverse();
    pols.reverse();
    auxs.reverse();
    Ok(BackwardPass {
        g: gs,
        f: fs,
        policies: pols,
        aux: auxs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation on the F update, in `(0, 1]`.
    pub damping: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        StationaryOptions {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StationarySolution<T: Real = f64> {
    pub g: QuadraticG<T>,
    pub f: QuadraticF<T>,
    pub policy: GaussianPolicy<T>,
    pub aux: AuxQuantities<T>,
    pub iterations: usize,
    pub residual: f64,
}

/// Fixed point of `F ← f_from_g(R̂ + γ E[F'])` at a single point with `ȳ' = ȳ`.
pub fn stationary_solve<T: Real>(
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    beta: T,
    point: &LinearizationPoint<T>,
    opts: &StationaryOptions,
) -> Result<StationarySolution<T>> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must be in (0, 1], got {}",
            opts.damping
        )));
    }
    let point = point.stationary();
    let lin = linearize_dynamics(params, &point)?;
    let shifted = shift_reward(&reward_coefficients(params), &point);
    let n_a = params.n_a();
    let n_y = params.n_y();
    let d = c::<T>(opts.damping);
    let one_minus_d = c::<T>(1.0 - opts.damping);

    let mut f = QuadraticF::<T>::zeros(n_y);
    let mut g = QuadraticG::<T>::zeros(n_a, n_y);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let h = expected_next_f(&f, &lin)?;
        let g_new = g_update(&shifted, &h, params.gamma_disc);
        let (f_new, aux) = f_from_g(&g_new, prior, beta, &point)?;
        let f_new = if opts.damping < 1.0 {
            QuadraticF {
                f_yy: &f.f_yy * one_minus_d + &f_new.f_yy * d,
                f_y: &f.f_y * one_minus_d + &f_new.f_y * d,
                f0: f.f0 * one_minus_d + f_new.f0 * d,
            }
        } else {
            f_new
        };
        residual = g_new.max_abs_diff(&g).max(f_new.max_abs_diff(&f));
        g = g_new;
        f = f_new.symmetrized();
        if !residual.is_finite() {
            break;
        }
        if residual < opts.tol {
            let policy = policy_update(&g, prior, beta, &point)?;
            return Ok(StationarySolution {
                g,
                f,
                policy,
                aux,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn setup() -> (ModelParams, GaussianPolicy, LinearizationPoint) {
        let mut p = ModelParams::new(1, 1).with_scalar_costs(0.02, 0.03, 0.0, 0.001, 0.002);
        p.mu = DVector::from_element(1, 0.05);
        p.lambda = 0.3;
        p.w = DMatrix::from_element(1, 1, 0.02);
        p.sigma_r = DMatrix::from_element(1, 1, 0.01);
        let prior = GaussianPolicy::from_scalars(0.0, 0.0, 0.0, 0.5, 2, 2).unwrap();
        let y = DVector::from_vec(vec![1.0, 0.1]);
        let pt = LinearizationPoint {
            a_bar: DVector::from_vec(vec![0.05, 0.02]),
            y_bar: y.clone(),
            y_bar_next: y,
        };
        (p, prior, pt)
    }

    #[test]
    fn zero_rewards_converge_at_once() {
        let (_, prior, pt) = setup();
        let mut p = ModelParams::new(1, 1);
        p.sigma_r = DMatrix::zeros(1, 1);
        p.sigma_z = DMatrix::zeros(1, 1);
        let pt0 = LinearizationPoint {
            a_bar: DVector::zeros(2),
            ..pt
        };
        let s = stationary_solve(&p, &prior, 1.0, &pt0, &StationaryOptions::default()).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.f.f0, 0.0);
        assert_eq!(s.policy, prior);
    }

    #[test]
    fn myopic_when_undiscounted_future_is_off() {
        let (mut p, prior, pt) = setup();
        p.gamma_disc = 0.0;
        let s = stationary_solve(&p, &prior, 1.0, &pt, &StationaryOptions::default()).unwrap();
        let g = shift_reward(&reward_coefficients(&p), &pt.stationary());
        assert!((s.g.g_aa - g.r_aa).abs().max() < 1e-15);
        assert!((s.g.g0 - g.r_bar).abs() < 1e-15);
    }

    #[test]
    fn one_step_pass_is_terminal_plus_update() {
        let (p, prior, pt) = setup();
        let mut pt1 = pt.clone();
        pt1.y_bar = DVector::from_vec(vec![1.02, 0.08]);
        let da = DVector::from_vec(vec![0.0, 0.01]);
        let bp = backward_pass(&p, &prior, &[pt.clone(), pt1.clone()], &da).unwrap();
        assert_eq!(bp.horizon(), 1);
        let coeffs = reward_coefficients(&p);
        let f1 = terminal_f(&shift_reward(&coeffs, &pt1), &da).unwrap();
        let mut p0 = pt.clone();
        p0.y_bar_next = pt1.y_bar.clone();
        let h = expected_next_f(&f1, &linearize_dynamics(&p, &p0).unwrap()).unwrap();
        let g0 = g_update(&shift_reward(&coeffs, &p0), &h, p.gamma_disc);
        assert_eq!(bp.f[1], f1);
        assert_eq!(bp.g[0], g0);
        assert!(bp.aux[1].is_none());
    }
}
