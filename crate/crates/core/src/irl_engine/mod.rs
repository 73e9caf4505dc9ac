//! Inverse RL by variational EM: the Gaussian recognition model, the
//! closed-form free energy of observed transitions, and the EM drivers for the
//! market portfolio and for a single investor.

mod checkpoint;
mod em;
mod synthetic;
mod theta;

pub use checkpoint::{read_checkpoint, read_checkpoint_str, write_checkpoint, write_checkpoint_string, Checkpoint};
pub use em::{
    batch_free_energy, e_step, ih_if_run, m_step, refresh_point, single_investor_run,
    solve_policy_model, EmConfig, EmMode, EmResult, EmState, IterationDiag, PolicyModel, StepInfo,
    UpdateRule,
};
pub use synthetic::{simulate_market, SyntheticConfig};
pub use theta::{gradient, FitMask, GradMode, OmegaLayout, ThetaMap};

use nalgebra::{DMatrix, DVector};

use crate::entropy_rl::{GaussianPolicy, LinearizationPoint, QuadraticF, QuadraticG};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{l_split, quad_form, spd_inv, spd_logdet, trace_prod};
use crate::model_core::ModelParams;
use crate::scalar::{c, lift_m, lift_v, Real};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters `ω` of the recognition model.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams<T: Real = f64> {
    pub mu_a: DVector<T>,
    pub lambda_a: DMatrix<T>,
    pub sigma_a: DMatrix<T>,
    pub mu_phi: DVector<T>,
    pub lambda_phi: DMatrix<T>,
    pub sigma_phi: DMatrix<T>,
    pub mu_varphi: DVector<T>,
    pub lambda_varphi_1: DMatrix<T>,
    pub lambda_varphi_2: DMatrix<T>,
    pub sigma_varphi: DMatrix<T>,
    pub sigma_delta: DMatrix<T>,
}

impl VariationalParams<f64> {
    /// Action marginal at the prior, encoders passing `y_t` through, and
    /// `Σ_δ = delta_ratio·Σ_p`.
    pub fn init(prior: &GaussianPolicy, n_y: usize, encoder_var: f64, delta_ratio: f64) -> Self {
        VariationalParams {
            mu_a: prior.a0.clone(),
            lambda_a: prior.a1.clone(),
            sigma_a: prior.sigma_p.clone(),
            mu_phi: DVector::zeros(n_y),
            lambda_phi: DMatrix::identity(n_y, n_y),
            sigma_phi: DMatrix::identity(n_y, n_y) * encoder_var,
            mu_varphi: DVector::zeros(n_y),
            lambda_varphi_1: DMatrix::identity(n_y, n_y),
            lambda_varphi_2: DMatrix::zeros(n_y, n_y),
            sigma_varphi: DMatrix::identity(n_y, n_y) * encoder_var,
            sigma_delta: &prior.sigma_p * delta_ratio,
        }
    }

    pub fn lift<T: Real>(&self) -> VariationalParams<T> {
        VariationalParams {
            mu_a: lift_v(&self.mu_a),
            lambda_a: lift_m(&self.lambda_a),
            sigma_a: lift_m(&self.sigma_a),
            mu_phi: lift_v(&self.mu_phi),
            lambda_phi: lift_m(&self.lambda_phi),
            sigma_phi: lift_m(&self.sigma_phi),
            mu_varphi: lift_v(&self.mu_varphi),
            lambda_varphi_1: lift_m(&self.lambda_varphi_1),
            lambda_varphi_2: lift_m(&self.lambda_varphi_2),
            sigma_varphi: lift_m(&self.sigma_varphi),
            sigma_delta: lift_m(&self.sigma_delta),
        }
    }

    /// `Tr Σ_δ / Tr Σ_a`.
    pub fn jitter_ratio(&self) -> f64 {
        self.sigma_delta.trace() / self.sigma_a.trace()
    }
}

impl<T: Real> VariationalParams<T> {
    pub fn n_a(&self) -> usize {
        self.mu_a.len()
    }

    pub fn n_y(&self) -> usize {
        self.mu_phi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_a, n_y) = (self.n_a(), self.n_y());
        check_dim("lambda_a rows", n_a, self.lambda_a.nrows())?;
        check_dim("lambda_a cols", n_y, self.lambda_a.ncols())?;
        check_dim("lambda_phi", n_y, self.lambda_phi.nrows())?;
        check_dim("lambda_varphi_1", n_y, self.lambda_varphi_1.nrows())?;
        check_dim("lambda_varphi_2", n_y, self.lambda_varphi_2.nrows())?;
        for (m, what) in [
            (&self.sigma_a, "Sigma_a"),
            (&self.sigma_phi, "Sigma_phi"),
            (&self.sigma_varphi, "Sigma_varphi"),
            (&self.sigma_delta, "Sigma_delta"),
        ] {
            crate::linalg::chol(m, what)?;
        }
        Ok(())
    }

    /// Mean of the action marginal at `y`.
    pub fn action_mean(&self, y: &DVector<T>) -> DVector<T> {
        &self.mu_a + &self.lambda_a * y
    }
}

/// `Σ_w = Σ_a + Σ_δ`.
pub fn marginal_action_cov<T: Real>(omega: &VariationalParams<T>) -> DMatrix<T> {
    &omega.sigma_a + &omega.sigma_delta
}

/// Gaussian marginal of `ȳ_t` after integrating out `ȳ_{t+1}`.
pub fn marginal_ybar<T: Real>(
    omega: &VariationalParams<T>,
    y: &DVector<T>,
    y_next: &DVector<T>,
) -> (DVector<T>, DMatrix<T>) {
    let l2 = &omega.lambda_varphi_2;
    let mu_next = &omega.mu_phi + &omega.lambda_phi * y_next;
    let mu_h = l2 * mu_next + &omega.lambda_varphi_1 * y + &omega.mu_varphi;
    let sigma_h = &omega.sigma_varphi + l2 * &omega.sigma_phi * l2.transpose();
    (mu_h, sigma_h)
}

/// Precision of the joint `(ȳ_{t+1}, ȳ_t)` encoder distribution.
pub fn joint_inv_cov<T: Real>(omega: &VariationalParams<T>) -> Result<DMatrix<T>> {
    let n = omega.n_y();
    let sp = spd_inv(&omega.sigma_phi, "Sigma_phi")?;
    let sv = spd_inv(&omega.sigma_varphi, "Sigma_varphi")?;
    let l2 = &omega.lambda_varphi_2;
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(&sp + l2.transpose() * &sv * l2));
    let off = -(l2.transpose() * &sv);
    m.view_mut((0, n), (n, n)).copy_from(&off);
    m.view_mut((n, 0), (n, n)).copy_from(&off.transpose());
    m.view_mut((n, n), (n, n)).copy_from(&sv);
    Ok(m)
}

/// Entropy of the encoder pair and of the action marginal `q_ā`.
pub fn entropy_block<T: Real>(omega: &VariationalParams<T>) -> Result<T> {
    let n_y = c::<T>(omega.n_y() as f64);
    let n_a = c::<T>(omega.n_a() as f64);
    let l2pie = c::<T>(LN_2PI + 1.0);
    let half = c::<T>(0.5);
    let lj = spd_logdet(&omega.sigma_phi, "Sigma_phi")? + spd_logdet(&omega.sigma_varphi, "Sigma_varphi")?;
    let la = spd_logdet(&omega.sigma_a, "Sigma_a")?;
    Ok(half * (c::<T>(2.0) * n_y * l2pie + lj) + half * (n_a * l2pie + la))
}

/// Entropy of `q(a|y) = N(μ_a(y), Σ_w)`.
pub fn action_entropy<T: Real>(omega: &VariationalParams<T>) -> Result<T> {
    let n_a = c::<T>(omega.n_a() as f64);
    let l = spd_logdet(&marginal_action_cov(omega), "Sigma_w")?;
    Ok(c::<T>(0.5) * (n_a * c::<T>(LN_2PI + 1.0) + l))
}

/// Taylor coefficients of the return residual `Δ(ā + δa)` in `δa`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoeffs<T: Real = f64> {
    pub d0: DVector<T>,
    pub d1: DMatrix<T>,
    /// `diag(x'/s³)[I, I]` with `s = x + ū`.
    pub d2: DMatrix<T>,
    /// `x'/s³`, the coefficient of `(δu_i)²` in `Δ_i`.
    pub curvature: DVector<T>,
}

fn split_y<T: Real>(y: &DVector<T>, n: usize) -> (DVector<T>, DVector<T>) {
    (y.rows(0, n).into_owned(), y.rows(n, y.len() - n).into_owned())
}

/// Expansion of `Δ = x'/(x+u) − 1 − r_f − Wz + M u` around `a_bar`.
pub fn expansion_coeffs<T: Real>(
    params: &ModelParams<T>,
    a_bar: &DVector<T>,
    y: &DVector<T>,
    y_next: &DVector<T>,
) -> Result<ExpansionCoeffs<T>> {
    let n = params.n_assets();
    check_dim("state", params.n_y(), y.len())?;
    check_dim("next state", params.n_y(), y_next.len())?;
    check_dim("action", params.n_a(), a_bar.len())?;
    let (x, z) = split_y(y, n);
    let x1 = y_next.rows(0, n).into_owned();
    let l = l_split::<T>(n);
    let u = &l * a_bar;
    let s = &x + &u;
    if let Some(i) = (0..n).find(|&i| s[i].re() <= 0.0) {
        return Err(Error::Domain {
            asset: i,
            value: s[i].re(),
        });
    }
    let wz = &params.w * &z;
    let d0 = DVector::from_fn(n, |i, _| {
        x1[i] / s[i] - T::one() - params.r_f - wz[i] + params.mu[i] * u[i]
    });
    let mut d1 = DMatrix::zeros(n, 2 * n);
    let mut d2 = DMatrix::zeros(n, 2 * n);
    let mut curvature = DVector::zeros(n);
    for i in 0..n {
        let slope = params.mu[i] - x1[i] / (s[i] * s[i]);
        d1[(i, i)] = slope;
        d1[(i, n + i)] = -slope;
        let cv = x1[i] / (s[i] * s[i] * s[i]);
        curvature[i] = cv;
        d2[(i, i)] = cv;
        d2[(i, n + i)] = cv;
    }
    Ok(ExpansionCoeffs {
        d0,
        d1,
        d2,
        curvature,
    })
}

/// `log p_z(z'|z)` for the signal transition.
pub fn signal_log_density<T: Real>(params: &ModelParams<T>, y: &DVector<T>, y_next: &DVector<T>) -> Result<T> {
    let n = params.n_assets();
    let nz = params.n_signals();
    if nz == 0 {
        return Ok(T::zero());
    }
    let z = y.rows(n, nz);
    let z1 = y_next.rows(n, nz);
    let e = DVector::from_fn(nz, |k, _| z1[k] - (T::one() - params.phi[k]) * z[k]);
    let prec = spd_inv(&params.sigma_z, "Sigma_z")?;
    let ld = spd_logdet(&params.sigma_z, "Sigma_z")?;
    Ok(-(quad_form(&e, &prec, &e) + ld + c::<T>(nz as f64 * LN_2PI)) * c::<T>(0.5))
}

/// Exact `log p(y'|y,a)` with the position part measured in return space.
pub fn transition_log_density<T: Real>(
    params: &ModelParams<T>,
    y: &DVector<T>,
    a: &DVector<T>,
    y_next: &DVector<T>,
) -> Result<T> {
    let n = params.n_assets();
    let d = expansion_coeffs(params, a, y, y_next)?;
    let prec = spd_inv(&params.sigma_r, "Sigma_r")?;
    let ld = spd_logdet(&params.sigma_r, "Sigma_r")?;
    let lx = -(quad_form(&d.d0, &prec, &d.d0) + ld + c::<T>(n as f64 * LN_2PI)) * c::<T>(0.5);
    Ok(lx + signal_log_density(params, y, y_next)?)
}

/// Pieces of the policy-independent energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy0Parts<T: Real = f64> {
    /// `E_q log π₀(a|y)`.
    pub log_prior: T,
    /// Second-order expectation of the position log-density.
    pub log_transition: T,
    pub log_pz: T,
}

impl<T: Real> Energy0Parts<T> {
    pub fn total(&self) -> T {
        self.log_prior + self.log_transition + self.log_pz
    }
}

/// Expected log prior and transition density under `q(a|y)`, expanding the
/// return residual to second order around the mean action.
pub fn energy0_parts<T: Real>(
    omega: &VariationalParams<T>,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    y: &DVector<T>,
    y_next: &DVector<T>,
) -> Result<Energy0Parts<T>> {
    let n = params.n_assets();
    let n_a = params.n_a();
    check_dim("variational action dimension", n_a, omega.n_a())?;
    let half = c::<T>(0.5);
    let m_a = omega.action_mean(y);
    let sigma_w = marginal_action_cov(omega);

    let e = &m_a - prior.mean(y);
    let pp = spd_inv(&prior.sigma_p, "prior covariance")?;
    let log_prior = -(quad_form(&e, &pp, &e)
        + trace_prod(&pp, &sigma_w)
        + spd_logdet(&prior.sigma_p, "prior covariance")?
        + c::<T>(n_a as f64 * LN_2PI))
        * half;

    let d = expansion_coeffs(params, &m_a, y, y_next)?;
    let rp = spd_inv(&params.sigma_r, "Sigma_r")?;
    let l = l_split::<T>(n);
    let var_u = (&l * &sigma_w * l.transpose()).diagonal();
    let bias = d.curvature.component_mul(&var_u);
    let log_transition = -(quad_form(&d.d0, &rp, &d.d0)
        + trace_prod(&sigma_w, &(d.d1.transpose() * &rp * &d.d1))
        + spd_logdet(&params.sigma_r, "Sigma_r")?
        + c::<T>(n as f64 * LN_2PI))
        * half
        - quad_form(&d.d0, &rp, &bias);

    Ok(Energy0Parts {
        log_prior,
        log_transition,
        log_pz: signal_log_density(params, y, y_next)?,
    })
}

pub fn energy0<T: Real>(
    omega: &VariationalParams<T>,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    y: &DVector<T>,
    y_next: &DVector<T>,
) -> Result<T> {
    Ok(energy0_parts(omega, params, prior, y, y_next)?.total())
}

/// `β E_q[G(y,a) − F(y)]` with both functions expanded around `point`.
pub fn energy1<T: Real>(
    omega: &VariationalParams<T>,
    beta: T,
    g: &QuadraticG<T>,
    f: &QuadraticF<T>,
    point: &LinearizationPoint<T>,
    y: &DVector<T>,
) -> Result<T> {
    check_dim("G action dimension", g.g_aa.nrows(), omega.n_a())?;
    let dy = y - &point.y_bar;
    let da = omega.action_mean(y) - &point.a_bar;
    let sigma_w = marginal_action_cov(omega);
    Ok(beta * (g.eval(&dy, &da) + trace_prod(&g.g_aa, &sigma_w) - f.eval(&dy)))
}

/// Components of a transition's free energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyTerms<T: Real = f64> {
    /// Encoder and `q_ā` entropies.
    pub entropy: T,
    pub energy0: T,
    pub energy1: T,
    /// Entropy of `q(a|y)` minus `entropy`; makes the total a bound on the
    /// one-step log evidence.
    pub aux_correction: T,
}

impl<T: Real> FreeEnergyTerms<T> {
    pub fn total(&self) -> T {
        self.entropy + self.energy0 + self.energy1 + self.aux_correction
    }
}

/// Free energy of one observed transition `(y, y')`.
#[allow(clippy::too_many_arguments)]
pub fn transition_free_energy<T: Real>(
    omega: &VariationalParams<T>,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    g: &QuadraticG<T>,
    f: &QuadraticF<T>,
    point: &LinearizationPoint<T>,
    y: &DVector<T>,
    y_next: &DVector<T>,
) -> Result<FreeEnergyTerms<T>> {
    let entropy = entropy_block(omega)?;
    Ok(FreeEnergyTerms {
        entropy,
        energy0: energy0(omega, params, prior, y, y_next)?,
        energy1: energy1(omega, params.beta, g, f, point, y)?,
        aux_correction: action_entropy(omega)? - entropy,
    })
}

/// Observed path segment; `actions[t]` is the action between `states[t]` and `states[t+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub states: Vec<DVector<f64>>,
    pub actions: Option<Vec<DVector<f64>>>,
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Observed data: one-step transitions (market mode) or `T`-step windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub windows: Vec<Window>,
}

impl TransitionBatch {
    /// Consecutive one-step transitions of a single path.
    pub fn from_path(states: &[DVector<f64>], actions: Option<&[DVector<f64>]>) -> Self {
        let windows = (0..states.len().saturating_sub(1))
            .map(|t| Window {
                states: vec![states[t].clone(), states[t + 1].clone()],
                actions: actions.map(|a| vec![a[t].clone()]),
            })
            .collect();
        TransitionBatch { windows }
    }

    /// Non-overlapping `horizon`-step windows of a single path.
    pub fn windows_of(states: &[DVector<f64>], actions: Option<&[DVector<f64>]>, horizon: usize) -> Self {
        let mut windows = Vec::new();
        let mut t = 0;
        while horizon > 0 && t + horizon < states.len() {
            windows.push(Window {
                states: states[t..=t + horizon].to_vec(),
                actions: actions.map(|a| a[t..t + horizon].to_vec()),
            });
            t += horizon;
        }
        TransitionBatch { windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn has_actions(&self) -> bool {
        !self.windows.is_empty() && self.windows.iter().all(|w| w.actions.is_some())
    }

    pub fn validate(&self, n_assets: usize, n_y: usize) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Data("empty transition batch".into()));
        }
        let h = self.windows[0].horizon();
        for (k, w) in self.windows.iter().enumerate() {
            if w.horizon() != h || h == 0 {
                return Err(Error::Data(format!("window {k} has horizon {}, expected {h} > 0", w.horizon())));
            }
            for y in &w.states {
                check_dim("state", n_y, y.len())?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("state in window {k}")));
                }
                if y.rows(0, n_assets).iter().any(|v| *v <= 0.0) {
                    return Err(Error::Data(format!("non-positive position in window {k}")));
                }
            }
            if let Some(a) = &w.actions {
                check_dim("actions per window", h, a.len())?;
            }
        }
        Ok(())
    }
}

/// `Σ_t [log π_t(a_t|y_t) + log p(y_{t+1}|y_t,a_t)]` over a window with actions;
/// `policies[t]` is the policy at step `t` (a single entry is reused for all `t`).
pub fn complete_data_loglik<T: Real>(
    window: &Window,
    params: &ModelParams<T>,
    policies: &[GaussianPolicy<T>],
) -> Result<T> {
    let actions = window
        .actions
        .as_ref()
        .ok_or_else(|| Error::Data("complete-data likelihood needs observed actions".into()))?;
    if policies.is_empty() {
        return Err(Error::InvalidParameter("no policy supplied".into()));
    }
    let mut total = T::zero();
    for t in 0..window.horizon() {
        let pol = &policies[t.min(policies.len() - 1)];
        let y = lift_v::<T>(&window.states[t]);
        let y1 = lift_v::<T>(&window.states[t + 1]);
        let a = lift_v::<T>(&actions[t]);
        total += pol.log_density(&a, &y)? + transition_log_density(params, &y, &a, &y1)?;
    }
    Ok(total)
}
