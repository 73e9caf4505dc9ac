//! Entropy-regularized control: G- and F-function recursions, Gaussian policy
//! updates, finite-horizon backward pass and stationary fixed point.

mod linearize;
mod recursion;
mod solve;

pub use linearize::{linearize_dynamics, noiseless_image};
pub use recursion::{
    adversarial_cost, expected_next_f, f_from_g, fenchel_objective, g_update, policy_update,
    shift_reward, terminal_f,
};
pub use solve::{backward_pass, stationary_solve, BackwardPass, StationaryOptions, StationarySolution};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::linalg::{chol, l_split, quad_form, spd_inv, spd_logdet, sym};
use crate::model_core::ModelParams;
use crate::scalar::{c, lift_m, lift_v, max_mag, max_mag_v, re_m, re_v, Real};

/// Linear-Gaussian policy `N(A0 + A1 y, Σ_p)` over `a = [u⁺; u⁻]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy<T: Real = f64> {
    pub a0: DVector<T>,
    pub a1: DMatrix<T>,
    pub sigma_p: DMatrix<T>,
}

impl GaussianPolicy<f64> {
    /// Prior from scalars: `A0 = â₀·1`, `A1 = â₁·1`, and covariance with
    /// standard deviation `sigma_p` and constant correlation `rho_p`.
    pub fn from_scalars(
        a0: f64,
        a1: f64,
        rho_p: f64,
        sigma_p: f64,
        n_a: usize,
        n_y: usize,
    ) -> Result<Self> {
        let s2 = sigma_p * sigma_p;
        let cov = DMatrix::from_fn(n_a, n_a, |i, j| if i == j { s2 } else { rho_p * s2 });
        let p = GaussianPolicy {
            a0: DVector::from_element(n_a, a0),
            a1: DMatrix::from_element(n_a, n_y, a1),
            sigma_p: cov,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn lift<T: Real>(&self) -> GaussianPolicy<T> {
        GaussianPolicy {
            a0: lift_v(&self.a0),
            a1: lift_m(&self.a1),
            sigma_p: lift_m(&self.sigma_p),
        }
    }
}

impl<T: Real> GaussianPolicy<T> {
    pub fn n_a(&self) -> usize {
        self.a0.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("policy slope rows", self.a0.len(), self.a1.nrows())?;
        check_dim("policy covariance", self.a0.len(), self.sigma_p.nrows())?;
        chol(&self.sigma_p, "policy covariance").map(|_| ())
    }

    pub fn mean(&self, y: &DVector<T>) -> DVector<T> {
        &self.a0 + &self.a1 * y
    }

    pub fn log_density(&self, a: &DVector<T>, y: &DVector<T>) -> Result<T> {
        let e = a - self.mean(y);
        let prec = spd_inv(&self.sigma_p, "policy covariance")?;
        let logdet = spd_logdet(&self.sigma_p, "policy covariance")?;
        let n = c::<T>(self.n_a() as f64);
        Ok(-(n * c::<T>((2.0 * std::f64::consts::PI).ln()) + logdet + quad_form(&e, &prec, &e))
            * c::<T>(0.5))
    }

    pub fn re(&self) -> GaussianPolicy<f64> {
        GaussianPolicy {
            a0: re_v(&self.a0),
            a1: re_m(&self.a1),
            sigma_p: re_m(&self.sigma_p),
        }
    }
}

/// Conditioning values `(ā, ȳ, ȳ')` of the local expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint<T: Real = f64> {
    pub a_bar: DVector<T>,
    pub y_bar: DVector<T>,
    pub y_bar_next: DVector<T>,
}

impl LinearizationPoint<f64> {
    /// Forward-use point: `ā` is the prior mean at `ȳ`, `ȳ'` the noiseless image.
    pub fn forward(params: &ModelParams, prior: &GaussianPolicy, y_bar: &DVector<f64>) -> Self {
        let a_bar = prior.mean(y_bar);
        let y_bar_next = noiseless_image(params, y_bar, &a_bar);
        LinearizationPoint {
            a_bar,
            y_bar: y_bar.clone(),
            y_bar_next,
        }
    }

    pub fn lift<T: Real>(&self) -> LinearizationPoint<T> {
        LinearizationPoint {
            a_bar: lift_v(&self.a_bar),
            y_bar: lift_v(&self.y_bar),
            y_bar_next: lift_v(&self.y_bar_next),
        }
    }
}

impl<T: Real> LinearizationPoint<T> {
    pub fn u_bar(&self) -> DVector<T> {
        let n = self.a_bar.len() / 2;
        l_split::<T>(n) * &self.a_bar
    }

    pub fn x_bar(&self) -> DVector<T> {
        let n = self.a_bar.len() / 2;
        self.y_bar.rows(0, n).into_owned()
    }

    /// Same point with `ȳ' = ȳ`, as used by the stationary recursion.
    pub fn stationary(&self) -> Self {
        LinearizationPoint {
            a_bar: self.a_bar.clone(),
            y_bar: self.y_bar.clone(),
            y_bar_next: self.y_bar.clone(),
        }
    }
}

/// Affine-plus-multiplicative-noise approximation of the state transition.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDynamics<T: Real = f64> {
    pub psi_0: DVector<T>,
    pub psi_y: DMatrix<T>,
    pub psi_a: DMatrix<T>,
    /// Noise covariance at the point, `blockdiag(Σ_r∘s̄s̄ᵀ, Σ_z)`.
    pub sigma_y: DMatrix<T>,
    pub omega_0: DVector<T>,
    pub omega_x: DMatrix<T>,
    pub omega_u: DMatrix<T>,
    pub omega_z: DMatrix<T>,
    /// Post-trade positions `x̄ + ū`.
    pub s_bar: DVector<T>,
    pub sigma_r: DMatrix<T>,
    pub sigma_z: DMatrix<T>,
}

/// Reward coefficients re-expanded around a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedReward<T: Real = f64> {
    pub r_yy: DMatrix<T>,
    pub r_aa: DMatrix<T>,
    pub r_ay: DMatrix<T>,
    pub r_a: DVector<T>,
    pub r_y: DVector<T>,
    /// Reward at the point.
    pub r_bar: T,
}

impl<T: Real> ShiftedReward<T> {
    pub fn eval(&self, dy: &DVector<T>, da: &DVector<T>) -> T {
        self.r_bar
            + quad_form(da, &self.r_aa, da)
            + quad_form(dy, &self.r_yy, dy)
            + quad_form(da, &self.r_ay, dy)
            + da.dot(&self.r_a)
            + dy.dot(&self.r_y)
    }
}

/// `G(δy,δa) = δaᵀG_aa δa + δyᵀG_yy δy + δaᵀG_ay δy + δaᵀG_a + δyᵀG_y + g0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticG<T: Real = f64> {
    pub g_aa: DMatrix<T>,
    pub g_yy: DMatrix<T>,
    pub g_ay: DMatrix<T>,
    pub g_a: DVector<T>,
    pub g_y: DVector<T>,
    pub g0: T,
}

impl<T: Real> QuadraticG<T> {
    pub fn zeros(n_a: usize, n_y: usize) -> Self {
        QuadraticG {
            g_aa: DMatrix::zeros(n_a, n_a),
            g_yy: DMatrix::zeros(n_y, n_y),
            g_ay: DMatrix::zeros(n_a, n_y),
            g_a: DVector::zeros(n_a),
            g_y: DVector::zeros(n_y),
            g0: T::zero(),
        }
    }

    pub fn eval(&self, dy: &DVector<T>, da: &DVector<T>) -> T {
        quad_form(da, &self.g_aa, da)
            + quad_form(dy, &self.g_yy, dy)
            + quad_form(da, &self.g_ay, dy)
            + da.dot(&self.g_a)
            + dy.dot(&self.g_y)
            + self.g0
    }

    pub fn re(&self) -> QuadraticG<f64> {
        QuadraticG {
            g_aa: re_m(&self.g_aa),
            g_yy: re_m(&self.g_yy),
            g_ay: re_m(&self.g_ay),
            g_a: re_v(&self.g_a),
            g_y: re_v(&self.g_y),
            g0: self.g0.re(),
        }
    }

    pub(crate) fn max_abs_diff(&self, o: &Self) -> f64 {
        max_mag(&(&self.g_aa - &o.g_aa))
            .max(max_mag(&(&self.g_yy - &o.g_yy)))
            .max(max_mag(&(&self.g_ay - &o.g_ay)))
            .max(max_mag_v(&(&self.g_a - &o.g_a)))
            .max(max_mag_v(&(&self.g_y - &o.g_y)))
            .max((self.g0 - o.g0).mag())
    }
}

/// `F(δy) = δyᵀF_yy δy + δyᵀF_y + F0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticF<T: Real = f64> {
    pub f_yy: DMatrix<T>,
    pub f_y: DVector<T>,
    pub f0: T,
}

impl<T: Real> QuadraticF<T> {
    pub fn zeros(n_y: usize) -> Self {
        QuadraticF {
            f_yy: DMatrix::zeros(n_y, n_y),
            f_y: DVector::zeros(n_y),
            f0: T::zero(),
        }
    }

    pub fn eval(&self, dy: &DVector<T>) -> T {
        quad_form(dy, &self.f_yy, dy) + dy.dot(&self.f_y) + self.f0
    }

    /// Position block `F_xx` for `n` assets.
    pub fn f_xx(&self, n: usize) -> DMatrix<T> {
        self.f_yy.view((0, 0), (n, n)).into_owned()
    }

    /// Signal block `F_zz` for `n` assets.
    pub fn f_zz(&self, n: usize) -> DMatrix<T> {
        let m = self.f_yy.nrows() - n;
        self.f_yy.view((n, n), (m, m)).into_owned()
    }

    pub fn f_xz(&self, n: usize) -> DMatrix<T> {
        let m = self.f_yy.nrows() - n;
        self.f_yy.view((0, n), (n, m)).into_owned()
    }

    pub fn f_x(&self, n: usize) -> DVector<T> {
        self.f_y.rows(0, n).into_owned()
    }

    pub fn f_z(&self, n: usize) -> DVector<T> {
        self.f_y.rows(n, self.f_y.len() - n).into_owned()
    }

    pub fn re(&self) -> QuadraticF<f64> {
        QuadraticF {
            f_yy: re_m(&self.f_yy),
            f_y: re_v(&self.f_y),
            f0: self.f0.re(),
        }
    }

    pub(crate) fn max_abs_diff(&self, o: &Self) -> f64 {
        max_mag(&(&self.f_yy - &o.f_yy))
            .max(max_mag_v(&(&self.f_y - &o.f_y)))
            .max((self.f0 - o.f0).mag())
    }

    pub(crate) fn symmetrized(mut self) -> Self {
        self.f_yy = sym(&self.f_yy);
        self
    }
}

/// Auxiliary quantities of the Gaussian action integral.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxQuantities<T: Real = f64> {
    /// `ā − Â0 − Â1 ȳ`.
    pub b: DVector<T>,
    /// Posterior precision `Σ_p⁻¹ − 2βG_aa`.
    pub sigma_p_tilde: DMatrix<T>,
    /// Its inverse, the posterior covariance.
    pub sigma_post: DMatrix<T>,
    pub gamma_beta: DMatrix<T>,
    pub upsilon_beta: DMatrix<T>,
    pub e_ay: DMatrix<T>,
    pub d_ay: DMatrix<T>,
    pub e_a: DVector<T>,
    /// `(1/2β)(log|Σ_p| + log|Σ̃_p|)`, continuous at `β = 0`.
    pub l_beta: T,
}

/// Coefficients of `E[F_{t+1}(y') | δy, δa]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedF<T: Real = f64> {
    pub h_aa: DMatrix<T>,
    pub h_yy: DMatrix<T>,
    pub h_ay: DMatrix<T>,
    pub h_a: DVector<T>,
    pub h_y: DVector<T>,
    pub f_hat: T,
}

impl<T: Real> ExpectedF<T> {
    pub fn eval(&self, dy: &DVector<T>, da: &DVector<T>) -> T {
        quad_form(da, &self.h_aa, da)
            + quad_form(dy, &self.h_yy, dy)
            + quad_form(da, &self.h_ay, dy)
            + da.dot(&self.h_a)
            + dy.dot(&self.h_y)
            + self.f_hat
    }
}
