//! Portfolio, return and signal dynamics and the one-step quadratic reward.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{block2, quad_form, vcat};
use crate::scalar::{c, lift_m, lift_v, Real};

/// Structural parameters of the generative market model.
///
/// `phi` and `upsilon` are stored per stacked signal (length / width `K·N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f64> {
    pub r_f: T,
    /// N×(K·N) loadings.
    pub w: DMatrix<T>,
    /// Diagonal of the permanent impact matrix.
    pub mu: DVector<T>,
    pub sigma_r: DMatrix<T>,
    pub phi: DVector<T>,
    pub sigma_z: DMatrix<T>,
    pub lambda: T,
    pub gamma_plus: DMatrix<T>,
    pub gamma_minus: DMatrix<T>,
    /// N×(K·N) cross-impact.
    pub upsilon: DMatrix<T>,
    pub nu_plus: DVector<T>,
    pub nu_minus: DVector<T>,
    pub gamma_disc: T,
    pub beta: T,
}

impl ModelParams<f64> {
    /// Neutral parameters for `n` assets and `k` signals per asset: no impact,
    /// no costs, unit noise, `γ = 0.9`, `β = 1`.
    pub fn new(n: usize, k: usize) -> Self {
        let nz = n * k;
        ModelParams {
            r_f: 0.0,
            w: DMatrix::zeros(n, nz),
            mu: DVector::zeros(n),
            sigma_r: DMatrix::identity(n, n),
            phi: DVector::from_element(nz, 0.5),
            sigma_z: DMatrix::identity(nz, nz),
            lambda: 0.0,
            gamma_plus: DMatrix::zeros(n, n),
            gamma_minus: DMatrix::zeros(n, n),
            upsilon: DMatrix::zeros(n, nz),
            nu_plus: DVector::zeros(n),
            nu_minus: DVector::zeros(n),
            gamma_disc: 0.9,
            beta: 1.0,
        }
    }

    /// Scalar-times-identity fees and impacts.
    pub fn with_scalar_costs(
        mut self,
        gamma_plus: f64,
        gamma_minus: f64,
        upsilon: f64,
        nu_plus: f64,
        nu_minus: f64,
    ) -> Self {
        let n = self.n_assets();
        let nz = self.n_signals();
        self.gamma_plus = DMatrix::identity(n, n) * gamma_plus;
        self.gamma_minus = DMatrix::identity(n, n) * gamma_minus;
        self.upsilon = DMatrix::from_element(n, nz, upsilon);
        self.nu_plus = DVector::from_element(n, nu_plus);
        self.nu_minus = DVector::from_element(n, nu_minus);
        self
    }

    /// Set permanent impact from a full matrix; off-diagonal entries are rejected.
    pub fn with_impact_matrix(mut self, m: &DMatrix<f64>) -> Result<Self> {
        let n = self.n_assets();
        check_dim("impact matrix rows", n, m.nrows())?;
        check_dim("impact matrix cols", n, m.ncols())?;
        for i in 0..n {
            for j in 0..n {
                if i != j && m[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(
                        "impact matrix M must be diagonal".into(),
                    ));
                }
            }
        }
        self.mu = m.diagonal();
        Ok(self)
    }

    /// Signal-mean-reversion rates given per signal kind (`K`), broadcast over assets.
    pub fn with_phi_per_kind(mut self, phi_k: &[f64]) -> Self {
        let n = self.n_assets();
        let k = phi_k.len();
        self.phi = DVector::from_fn(n * k, |i, _| phi_k[i % k]);
        self
    }

    pub fn lift<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            r_f: c(self.r_f),
            w: lift_m(&self.w),
            mu: lift_v(&self.mu),
            sigma_r: lift_m(&self.sigma_r),
            phi: lift_v(&self.phi),
            sigma_z: lift_m(&self.sigma_z),
            lambda: c(self.lambda),
            gamma_plus: lift_m(&self.gamma_plus),
            gamma_minus: lift_m(&self.gamma_minus),
            upsilon: lift_m(&self.upsilon),
            nu_plus: lift_v(&self.nu_plus),
            nu_minus: lift_v(&self.nu_minus),
            gamma_disc: c(self.gamma_disc),
            beta: c(self.beta),
        }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn n_assets(&self) -> usize {
        self.mu.len()
    }
    pub fn n_signals(&self) -> usize {
        self.phi.len()
    }
    pub fn n_y(&self) -> usize {
        self.n_assets() + self.n_signals()
    }
    pub fn n_a(&self) -> usize {
        2 * self.n_assets()
    }

    /// Check shapes and the documented invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_assets();
        let nz = self.n_signals();
        check_dim("W rows", n, self.w.nrows())?;
        check_dim("W cols", nz, self.w.ncols())?;
        check_dim("Sigma_r", n, self.sigma_r.nrows())?;
        check_dim("Sigma_r", n, self.sigma_r.ncols())?;
        check_dim("Sigma_z", nz, self.sigma_z.nrows())?;
        check_dim("Sigma_z", nz, self.sigma_z.ncols())?;
        check_dim("Gamma_plus", n, self.gamma_plus.nrows())?;
        check_dim("Gamma_minus", n, self.gamma_minus.nrows())?;
        check_dim("Upsilon rows", n, self.upsilon.nrows())?;
        check_dim("Upsilon cols", nz, self.upsilon.ncols())?;
        check_dim("nu_plus", n, self.nu_plus.len())?;
        check_dim("nu_minus", n, self.nu_minus.len())?;
        let bad = |s: &str| Err(Error::InvalidParameter(s.to_string()));
        if self.mu.iter().any(|m| m.re() < 0.0) {
            return bad("impact mu must be >= 0");
        }
        if self.phi.iter().any(|p| p.re() < 0.0 || p.re() > 1.0) {
            return bad("Phi entries must lie in [0,1]");
        }
        if self.nu_plus.iter().chain(self.nu_minus.iter()).any(|v| v.re() < 0.0) {
            return bad("fees must be >= 0");
        }
        if self.lambda.re() < 0.0 {
            return bad("risk aversion must be >= 0");
        }
        if self.beta.re() < 0.0 {
            return bad("beta must be >= 0");
        }
        let g = self.gamma_disc.re();
        if !(0.0..=1.0).contains(&g) {
            return bad("discount factor must lie in [0,1]");
        }
        for (name, m) in [("Sigma_r", &self.sigma_r), ("Sigma_z", &self.sigma_z)] {
            let mr = m.map(|x| x.re());
            if (&mr - mr.transpose()).abs().max() > 1e-12 * (1.0 + mr.abs().max()) {
                return bad(&format!("{name} must be symmetric"));
            }
            if let Some(e) = mr.symmetric_eigenvalues().iter().cloned().reduce(f64::min) {
                if e < -1e-12 {
                    return bad(&format!("{name} must be positive semi-definite"));
                }
            }
        }
        Ok(())
    }

    fn impact_plus_risk(&self) -> DMatrix<T> {
        DMatrix::from_diagonal(&self.mu) + &self.sigma_r * self.lambda
    }
}

/// Extended state `y = [x; z]` at period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub t: usize,
}

impl ExtendedState {
    pub fn new(x: DVector<f64>, z: DVector<f64>, t: usize) -> Self {
        ExtendedState { x, z, t }
    }

    pub fn y(&self) -> DVector<f64> {
        vcat(&self.x, &self.z)
    }

    pub fn from_y(y: &DVector<f64>, n: usize, t: usize) -> Self {
        ExtendedState {
            x: y.rows(0, n).into_owned(),
            z: y.rows(n, y.len() - n).into_owned(),
            t,
        }
    }
}

/// Trade split into buy and sell legs, both non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub u_plus: DVector<f64>,
    pub u_minus: DVector<f64>,
}

impl Action {
    pub fn new(u_plus: DVector<f64>, u_minus: DVector<f64>) -> Result<Self> {
        check_dim("action legs", u_plus.len(), u_minus.len())?;
        if u_plus.iter().chain(u_minus.iter()).any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter("action legs must be >= 0".into()));
        }
        Ok(Action { u_plus, u_minus })
    }

    /// Split a signed trade by strict sign; zeros go to neither leg.
    pub fn from_trade(u: &DVector<f64>) -> Self {
        Action {
            u_plus: u.map(|v| if v > 0.0 { v } else { 0.0 }),
            u_minus: u.map(|v| if v < 0.0 { -v } else { 0.0 }),
        }
    }

    /// Reads `a = [u⁺; u⁻]` without sign checks.
    pub fn from_vector(a: &DVector<f64>) -> Self {
        let n = a.len() / 2;
        Action {
            u_plus: a.rows(0, n).into_owned(),
            u_minus: a.rows(n, n).into_owned(),
        }
    }

    pub fn trade(&self) -> DVector<f64> {
        &self.u_plus - &self.u_minus
    }

    pub fn abs_trade(&self) -> DVector<f64> {
        &self.u_plus + &self.u_minus
    }

    pub fn as_vector(&self) -> DVector<f64> {
        vcat(&self.u_plus, &self.u_minus)
    }
}

/// Coefficients of `R(y,a) = yᵀR_yy y + aᵀR_aa a + aᵀR_ay y + aᵀR_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardCoeffs<T: Real = f64> {
    pub r_yy: DMatrix<T>,
    pub r_aa: DMatrix<T>,
    pub r_ay: DMatrix<T>,
    pub r_a: DVector<T>,
}

impl<T: Real> RewardCoeffs<T> {
    pub fn eval(&self, y: &DVector<T>, a: &DVector<T>) -> T {
        quad_form(y, &self.r_yy, y) + quad_form(a, &self.r_aa, a) + quad_form(a, &self.r_ay, y)
            + a.dot(&self.r_a)
    }
}

/// A sequence of states with optional actions and return residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<ExtendedState>,
    pub actions: Option<Vec<Action>>,
    /// Return residuals `ε_t`, present when the path was simulated.
    pub residuals: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Lengths agree and, with actions and residuals, the wealth update holds to `tol`.
    pub fn validate(&self, params: &ModelParams, tol: f64) -> Result<()> {
        let t = self.horizon();
        if let Some(acts) = &self.actions {
            check_dim("trajectory actions", t, acts.len())?;
            if let Some(res) = &self.residuals {
                check_dim("trajectory residuals", t, res.len())?;
                for s in 0..t {
                    let st = &self.states[s];
                    let u = acts[s].trade();
                    let r = excess_returns(params, &st.z, &u, &res[s])?
                        .add_scalar(params.r_f);
                    let next = step_wealth(&st.x, &u, &r)?;
                    let gap = (&next - &self.states[s + 1].x).abs().max();
                    if gap > tol {
                        return Err(Error::Data(format!(
                            "wealth identity violated at t={s} by {gap:e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `W z − Mᵀu + ε`.
pub fn excess_returns(
    params: &ModelParams,
    z: &DVector<f64>,
    u: &DVector<f64>,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = params.n_assets();
    check_dim("signal vector", params.n_signals(), z.len())?;
    check_dim("trade vector", n, u.len())?;
    check_dim("residual vector", n, eps.len())?;
    Ok(&params.w * z - params.mu.component_mul(u) + eps)
}

/// `x' = (1 + r)∘(x + u)`.
pub fn step_wealth(x: &DVector<f64>, u: &DVector<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("trade vector", x.len(), u.len())?;
    check_dim("return vector", x.len(), r.len())?;
    Ok((x + u).component_mul(&r.add_scalar(1.0)))
}

/// `z' = (I − Φ)∘z + ε_z`.
pub fn step_signals(
    params: &ModelParams,
    z: &DVector<f64>,
    eps_z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("signal vector", params.n_signals(), z.len())?;
    check_dim("signal noise", params.n_signals(), eps_z.len())?;
    Ok(params.phi.map(|p| 1.0 - p).component_mul(z) + eps_z)
}

/// Quadratic reward coefficients.
pub fn reward_coefficients<T: Real>(params: &ModelParams<T>) -> RewardCoeffs<T> {
    let n = params.n_assets();
    let nz = params.n_signals();
    let a = params.impact_plus_risk();
    let r_aa = block2(&(-&a), &a, &a, &(-&a));
    let r_yy = block2(
        &(&params.sigma_r * (-params.lambda)),
        &(&params.w - &params.upsilon),
        &DMatrix::zeros(nz, n),
        &DMatrix::zeros(nz, nz),
    );
    let m = DMatrix::from_diagonal(&params.mu);
    let two_risk = &params.sigma_r * (params.lambda * c::<T>(2.0));
    let top_x = -(&m + &two_risk) - params.gamma_plus.transpose();
    let bot_x = (&m + &two_risk) - params.gamma_minus.transpose();
    let r_ay = block2(&top_x, &params.w, &bot_x, &(-&params.w));
    let r_a = -vcat(&params.nu_plus, &params.nu_minus);
    RewardCoeffs {
        r_yy,
        r_aa,
        r_ay,
        r_a,
    }
}

/// Evaluate the expected one-step reward at `(y, a)`.
pub fn expected_reward(
    coeffs: &RewardCoeffs,
    y: &ExtendedState,
    a: &Action,
) -> Result<f64> {
    let yv = y.y();
    let av = a.as_vector();
    check_dim("state", coeffs.r_yy.nrows(), yv.len())?;
    check_dim("action", coeffs.r_aa.nrows(), av.len())?;
    Ok(coeffs.eval(&yv, &av))
}

/// Terminal trade `x_target − x_prev`, split by sign.
pub fn terminal_action(x_prev: &DVector<f64>, x_target: &DVector<f64>) -> Result<Action> {
    check_dim("terminal target", x_prev.len(), x_target.len())?;
    Ok(Action::from_trade(&(x_target - x_prev)))
}

/// `(r − r_f 1)ᵀ(x + u)`.
pub fn portfolio_excess_change(
    x: &DVector<f64>,
    u: &DVector<f64>,
    r: &DVector<f64>,
    r_f: f64,
) -> Result<f64> {
    check_dim("trade vector", x.len(), u.len())?;
    check_dim("return vector", x.len(), r.len())?;
    Ok(r.add_scalar(-r_f).dot(&(x + u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn excess_returns_scalar() {
        let mut p = ModelParams::new(1, 1);
        p.w[(0, 0)] = 1.0;
        p.mu[0] = 0.1;
        let r = excess_returns(&p, &dvector![0.02], &dvector![0.5], &dvector![0.0]).unwrap();
        assert!((r[0] + 0.03).abs() < 1e-15);
        let zero = excess_returns(&ModelParams::new(1, 1), &dvector![0.3], &dvector![0.0], &dvector![0.0])
            .unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn wealth_steps() {
        assert_eq!(step_wealth(&dvector![1.0], &dvector![0.0], &dvector![0.0]).unwrap()[0], 1.0);
        let x = step_wealth(&dvector![1.0], &dvector![1.0], &dvector![0.1]).unwrap();
        assert!((x[0] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn signal_limits() {
        let mut p = ModelParams::new(1, 2);
        let z = dvector![0.4, -1.0];
        p.phi = dvector![1.0, 1.0];
        assert_eq!(step_signals(&p, &z, &dvector![0.0, 0.0]).unwrap(), dvector![0.0, 0.0]);
        p.phi = dvector![0.0, 0.0];
        assert_eq!(step_signals(&p, &z, &dvector![0.0, 0.0]).unwrap(), z);
    }

    #[test]
    fn r_aa_scalar_blocks() {
        let mut p = ModelParams::new(1, 1);
        p.mu[0] = 0.1;
        p.lambda = 0.2;
        let r = reward_coefficients(&p);
        let want = DMatrix::from_row_slice(2, 2, &[-0.3, 0.3, 0.3, -0.3]);
        assert!((r.r_aa - want).abs().max() < 1e-15);
        let r0 = reward_coefficients(&ModelParams::new(2, 1));
        assert_eq!(r0.r_aa, DMatrix::zeros(4, 4));
    }

    #[test]
    fn reward_without_action_is_state_quadratic() {
        let mut p = ModelParams::new(2, 1).with_scalar_costs(0.1, 0.2, 0.05, 0.01, 0.02);
        p.lambda = 0.3;
        p.w[(0, 0)] = 0.4;
        p.w[(1, 1)] = -0.2;
        let coeffs = reward_coefficients(&p);
        let y = ExtendedState::new(dvector![1.0, 2.0], dvector![0.5, -0.3], 0);
        let zero = Action::from_trade(&dvector![0.0, 0.0]);
        let yv = y.y();
        let want = (yv.transpose() * &coeffs.r_yy * &yv)[(0, 0)];
        assert_eq!(expected_reward(&coeffs, &y, &zero).unwrap(), want);
        let origin = ExtendedState::new(dvector![0.0, 0.0], dvector![0.0, 0.0], 0);
        assert_eq!(expected_reward(&coeffs, &origin, &zero).unwrap(), 0.0);
    }

    #[test]
    fn terminal_action_split() {
        let a = terminal_action(&dvector![1.0, 2.0], &dvector![2.0, 1.0]).unwrap();
        assert_eq!(a.u_plus, dvector![1.0, 0.0]);
        assert_eq!(a.u_minus, dvector![0.0, 1.0]);
        let same = terminal_action(&dvector![1.0], &dvector![1.0]).unwrap();
        assert_eq!(same.abs_trade(), dvector![0.0]);
    }

    #[test]
    fn excess_change_trivia() {
        let x = dvector![1.0, 2.0];
        let u = dvector![0.5, -1.0];
        assert_eq!(portfolio_excess_change(&x, &u, &dvector![0.01, 0.01], 0.01).unwrap(), 0.0);
        assert_eq!(
            portfolio_excess_change(&x, &(-&x), &dvector![0.3, -0.2], 0.01).unwrap(),
            0.0
        );
    }

    #[test]
    fn impact_matrix_must_be_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.01, 0.0, 0.2]);
        assert!(ModelParams::new(2, 1).with_impact_matrix(&m).is_err());
        let d = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let p = ModelParams::new(2, 1).with_impact_matrix(&d).unwrap();
        assert_eq!(p.mu, dvector![0.1, 0.2]);
    }

    #[test]
    fn phi_out_of_range_rejected() {
        let mut p = ModelParams::new(1, 1);
        p.phi[0] = 1.5;
        assert!(p.validate().is_err());
    }
}
