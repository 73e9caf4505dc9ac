use nalgebra::{DMatrix, DVector};

use super::{
    AuxQuantities, ExpectedF, GaussianPolicy, LinearizationPoint, LinearizedDynamics, QuadraticF,
    QuadraticG, ShiftedReward,
};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{chol, half_log_det_ratio, l_split, p_select, quad_form, spd_inv, sym, trace_prod};
use crate::model_core::RewardCoeffs;
use crate::scalar::{c, Real};

/// Re-expand the reward around `(ȳ, ā)`.
pub fn shift_reward<T: Real>(
    coeffs: &RewardCoeffs<T>,
    point: &LinearizationPoint<T>,
) -> ShiftedReward<T> {
    let y = &point.y_bar;
    let a = &point.a_bar;
    let r_a = &coeffs.r_a + (&coeffs.r_aa + coeffs.r_aa.transpose()) * a + &coeffs.r_ay * y;
    let r_y = (&coeffs.r_yy + coeffs.r_yy.transpose()) * y + coeffs.r_ay.transpose() * a;
    ShiftedReward {
        r_yy: coeffs.r_yy.clone(),
        r_aa: coeffs.r_aa.clone(),
        r_ay: coeffs.r_ay.clone(),
        r_a,
        r_y,
        r_bar: coeffs.eval(y, a),
    }
}

/// Terminal F-function: the shifted reward at the fixed terminal action offset.
pub fn terminal_f<T: Real>(reward: &ShiftedReward<T>, delta_a_t: &DVector<T>) -> Result<QuadraticF<T>> {
    check_dim("terminal action", reward.r_aa.nrows(), delta_a_t.len())?;
    Ok(QuadraticF {
        f_yy: sym(&reward.r_yy),
        f_y: &reward.r_y + reward.r_ay.transpose() * delta_a_t,
        f0: reward.r_bar + quad_form(delta_a_t, &reward.r_aa, delta_a_t) + delta_a_t.dot(&reward.r_a),
    })
}

/// Conditional expectation of the next-step F-function under the linearized dynamics.
pub fn expected_next_f<T: Real>(
    f_next: &QuadraticF<T>,
    lin: &LinearizedDynamics<T>,
) -> Result<ExpectedF<T>> {
    let n_y = lin.psi_y.nrows();
    let n = lin.s_bar.len();
    check_dim("F_{t+1}", n_y, f_next.f_yy.nrows())?;
    let f = sym(&f_next.f_yy);
    let q = f_next.f_xx(n).component_mul(&lin.sigma_r);
    let q = sym(&q);
    let l = l_split::<T>(n);
    let p = p_select::<T>(n, n_y);
    let two = c::<T>(2.0);
    let f_psi_y = &f * &lin.psi_y;
    let f_psi_a = &f * &lin.psi_a;
    let f_psi_0 = &f * &lin.psi_0;
    let q_s = &q * &lin.s_bar;
    let lt = l.transpose();
    let pt = p.transpose();

    let h_aa = lin.psi_a.transpose() * &f_psi_a + &lt * &q * &l;
    let h_yy = lin.psi_y.transpose() * &f_psi_y + &pt * &q * &p;
    let h_ay = (lin.psi_a.transpose() * &f_psi_y + &lt * &q * &p) * two;
    let h_a = lin.psi_a.transpose() * &f_next.f_y + (lin.psi_a.transpose() * &f_psi_0 + &lt * &q_s) * two;
    let h_y = lin.psi_y.transpose() * &f_next.f_y + (lin.psi_y.transpose() * &f_psi_0 + &pt * &q_s) * two;
    let f_hat = f_next.f0
        + lin.psi_0.dot(&f_next.f_y)
        + lin.psi_0.dot(&f_psi_0)
        + lin.s_bar.dot(&q_s)
        + trace_prod(&f_next.f_zz(n), &lin.sigma_z);
    Ok(ExpectedF {
        h_aa: sym(&h_aa),
        h_yy: sym(&h_yy),
        h_ay,
        h_a,
        h_y,
        f_hat,
    })
}

/// `G = R̂ + γ·E[F_{t+1}]`, coefficient-wise.
pub fn g_update<T: Real>(reward: &ShiftedReward<T>, h: &ExpectedF<T>, gamma_disc: T) -> QuadraticG<T> {
    QuadraticG {
        g_aa: sym(&(&reward.r_aa + &h.h_aa * gamma_disc)),
        g_yy: sym(&(&reward.r_yy + &h.h_yy * gamma_disc)),
        g_ay: &reward.r_ay + &h.h_ay * gamma_disc,
        g_a: &reward.r_a + &h.h_a * gamma_disc,
        g_y: &reward.r_y + &h.h_y * gamma_disc,
        g0: reward.r_bar + h.f_hat * gamma_disc,
    }
}

struct Posterior<T: Real> {
    p_tilde: DMatrix<T>,
    cov: DMatrix<T>,
    upsilon: DMatrix<T>,
}

fn posterior<T: Real>(g: &QuadraticG<T>, prior: &GaussianPolicy<T>, beta: T) -> Result<Posterior<T>> {
    check_dim("prior action dimension", g.g_aa.nrows(), prior.n_a())?;
    let prec = spd_inv(&prior.sigma_p, "prior covariance")?;
    let p_tilde = sym(&(&prec - &g.g_aa * (beta * c::<T>(2.0))));
    let cov = chol(&p_tilde, "Sigma_p^-1 - 2 beta G_aa")?.inverse();
    let upsilon = &cov * &prec;
    Ok(Posterior {
        p_tilde,
        cov,
        upsilon,
    })
}

/// F-function of the optimal policy: `(1/β) log ∫ π₀(a|y) e^{βG(y,a)} da`.
///
/// Every coefficient is finite at `β = 0`, where it equals `E_{π₀}[G]`.
pub fn f_from_g<T: Real>(
    g: &QuadraticG<T>,
    prior: &GaussianPolicy<T>,
    beta: T,
    point: &LinearizationPoint<T>,
) -> Result<(QuadraticF<T>, AuxQuantities<T>)> {
    if beta.re() < 0.0 {
        return Err(Error::InvalidParameter("beta must be >= 0".into()));
    }
    let post = posterior(g, prior, beta)?;
    let ups = &post.upsilon;
    let ups_t = ups.transpose();
    let gamma_b = sym(&(&ups_t * &g.g_aa * c::<T>(-2.0)));
    let a1 = &prior.a1;
    let b = &point.a_bar - &prior.a0 - a1 * &point.y_bar;
    let half = c::<T>(0.5);
    let l_beta = half_log_det_ratio(beta, &(&prior.sigma_p * &g.g_aa))?;

    let cov_gay = &post.cov * &g.g_ay;
    let cov_ga = &post.cov * &g.g_a;
    let f_yy = &g.g_yy - a1.transpose() * &gamma_b * a1 * half
        + sym(&(a1.transpose() * &ups_t * &g.g_ay))
        + g.g_ay.transpose() * &cov_gay * (beta * half);
    let f_y = &g.g_y + a1.transpose() * (&gamma_b * &b) + a1.transpose() * (&ups_t * &g.g_a)
        - g.g_ay.transpose() * (ups * &b)
        + g.g_ay.transpose() * &cov_ga * beta;
    let f0 = g.g0 - l_beta - quad_form(&b, &gamma_b, &b) * half - b.dot(&(&ups_t * &g.g_a))
        + g.g_a.dot(&cov_ga) * beta * half;

    let e_ay = ups * a1 + &cov_gay * (beta * half);
    let d_ay = g.g_ay.transpose() * ups - a1.transpose() * &gamma_b;
    let e_a = a1.transpose() * (&ups_t * &g.g_a) + g.g_ay.transpose() * &cov_ga * beta;
    let aux = AuxQuantities {
        b,
        sigma_p_tilde: post.p_tilde,
        sigma_post: post.cov,
        gamma_beta: gamma_b,
        upsilon_beta: post.upsilon,
        e_ay,
        d_ay,
        e_a,
        l_beta,
    };
    Ok((QuadraticF { f_yy: sym(&f_yy), f_y, f0 }, aux))
}

/// Posterior policy `π ∝ π₀ e^{βG}`; at `β = 0` the prior is returned unchanged.
pub fn policy_update<T: Real>(
    g: &QuadraticG<T>,
    prior: &GaussianPolicy<T>,
    beta: T,
    point: &LinearizationPoint<T>,
) -> Result<GaussianPolicy<T>> {
    if beta.mag() == 0.0 {
        return Ok(prior.clone());
    }
    let post = posterior(g, prior, beta)?;
    let a0 = &point.a_bar
        + &post.upsilon * (&prior.a0 - &point.a_bar)
        + &post.cov * (&g.g_a - &g.g_ay * &point.y_bar) * beta;
    let a1 = &post.upsilon * &prior.a1 + &post.cov * &g.g_ay * beta;
    Ok(GaussianPolicy {
        a0,
        a1,
        sigma_p: sym(&post.cov),
    })
}

/// Adversary's optimal cost `(1/β) log[π(a|y)/π₀(a|y)]`.
pub fn adversarial_cost(
    policy: &GaussianPolicy,
    prior: &GaussianPolicy,
    beta: f64,
    a: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::InvalidParameter(
            "adversarial cost needs beta > 0".into(),
        ));
    }
    Ok((policy.log_density(a, y)? - prior.log_density(a, y)?) / beta)
}

/// Objective whose minimum over `C` is `−(1/β) KL[π‖π₀]` on a discrete action set:
/// `Σ_a [−π(1 + C) + (1/β) π₀ e^{βC}] + 1 − 1/β`.
pub fn fenchel_objective(pi: &[f64], pi0: &[f64], cost: &[f64], beta: f64) -> f64 {
    let s: f64 = pi
        .iter()
        .zip(pi0)
        .zip(cost)
        .map(|((p, q), cst)| -p * (1.0 + cst) + q * (beta * cst).exp() / beta)
        .sum();
    s + 1.0 - 1.0 / beta
}
