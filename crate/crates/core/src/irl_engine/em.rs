//! E-step, M-step and the outer loops for the market (stationary) and
//! single-investor (finite-horizon) variants.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::theta::{gradient, FitMask, GradMode, OmegaLayout, ThetaMap};
use super::{complete_data_loglik, marginal_ybar, transition_free_energy, TransitionBatch, VariationalParams};
use crate::entropy_rl::{
    backward_pass, stationary_solve, GaussianPolicy, LinearizationPoint, QuadraticF, QuadraticG,
    StationaryOptions,
};
use crate::error::{Error, Result};
use crate::model_core::ModelParams;
use crate::optim::ascent_step;
use crate::scalar::{lift_m, lift_v, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmMode {
    /// One stationary G/F shared by all one-step transitions.
    #[default]
    Market,
    /// A backward pass over `T`-step windows with a flat terminal target.
    Investor,
}

impl std::str::FromStr for EmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "market" => Ok(EmMode::Market),
            "investor" => Ok(EmMode::Investor),
            _ => Err(Error::InvalidParameter(format!("unknown mode '{s}'"))),
        }
    }
}

/// Parameter update used by both steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// `x + α∇` with backtracking until `𝓕_b` does not decrease.
    #[default]
    Monotone,
    /// `(1−α)x + α∇`, applied unconditionally.
    AsWritten,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotone" => Ok(UpdateRule::Monotone),
            "as-written" => Ok(UpdateRule::AsWritten),
            _ => Err(Error::InvalidParameter(format!("unknown update rule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change of `𝓕_b` treated as no progress.
    pub tol: f64,
    /// Consecutive no-progress iterations before stopping.
    pub patience: usize,
    /// Windows per iteration; `None` uses the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub step_omega: f64,
    pub step_theta: f64,
    pub max_halvings: usize,
    pub grad: GradMode,
    pub rule: UpdateRule,
    pub fit: FitMask,
    pub stationary: StationaryOptions,
    /// Initial encoder variances.
    pub encoder_var: f64,
    /// `Σ_δ` as a multiple of the prior covariance.
    pub delta_ratio: f64,
    /// Upper bound on `Tr Σ_δ / Tr Σ_a` at initialization.
    pub max_delta_ratio: f64,
    pub refresh_point: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            tol: 1e-7,
            patience: 5,
            batch_size: None,
            seed: 0,
            step_omega: 1e-3,
            step_theta: 1e-4,
            max_halvings: 40,
            grad: GradMode::FiniteDiff,
            rule: UpdateRule::Monotone,
            fit: FitMask::all(),
            stationary: StationaryOptions {
                tol: 1e-12,
                max_iter: 100_000,
                damping: 1.0,
            },
            encoder_var: 1.0,
            delta_ratio: 1e-3,
            max_delta_ratio: 0.01,
            refresh_point: true,
        }
    }
}

/// G, F and policy per step of the data windows (a single entry in market mode).
#[derive(Debug, Clone)]
pub struct PolicyModel<T: Real = f64> {
    pub points: Vec<LinearizationPoint<T>>,
    pub g: Vec<QuadraticG<T>>,
    pub f: Vec<QuadraticF<T>>,
    pub policies: Vec<GaussianPolicy<T>>,
}

impl<T: Real> PolicyModel<T> {
    fn at(&self, t: usize) -> usize {
        t.min(self.g.len() - 1)
    }
}

impl PolicyModel<f64> {
    pub fn lift<T: Real>(&self) -> PolicyModel<T> {
        PolicyModel {
            points: self.points.iter().map(|p| p.lift()).collect(),
            g: self
                .g
                .iter()
                .map(|g| QuadraticG {
                    g_aa: lift_m(&g.g_aa),
                    g_yy: lift_m(&g.g_yy),
                    g_ay: lift_m(&g.g_ay),
                    g_a: lift_v(&g.g_a),
                    g_y: lift_v(&g.g_y),
                    g0: T::from_f64(g.g0).unwrap(),
                })
                .collect(),
            f: self
                .f
                .iter()
                .map(|f| QuadraticF {
                    f_yy: lift_m(&f.f_yy),
                    f_y: lift_v(&f.f_y),
                    f0: T::from_f64(f.f0).unwrap(),
                })
                .collect(),
            policies: self.policies.iter().map(|p| p.lift()).collect(),
        }
    }
}

/// Solve for G/F/policy at the given points: a stationary fixed point in
/// market mode, a backward pass over `points[0..=T]` in investor mode.
pub fn solve_policy_model<T: Real>(
    mode: EmMode,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    points: &[LinearizationPoint<T>],
    opts: &StationaryOptions,
) -> Result<PolicyModel<T>> {
    match mode {
        EmMode::Market => {
            let point = points
                .first()
                .ok_or_else(|| Error::InvalidParameter("no linearization point".into()))?
                .stationary();
            let s = stationary_solve(params, prior, params.beta, &point, opts)?;
            Ok(PolicyModel {
                points: vec![point],
                g: vec![s.g],
                f: vec![s.f],
                policies: vec![s.policy],
            })
        }
        EmMode::Investor => {
            if points.len() < 2 {
                return Err(Error::InvalidParameter(
                    "investor mode needs at least one step before the terminal point".into(),
                ));
            }
            let horizon = points.len() - 1;
            let delta_t = -&points[horizon].a_bar;
            let bp = backward_pass(params, prior, points, &delta_t)?;
            Ok(PolicyModel {
                points: points[..horizon].to_vec(),
                g: bp.g[..horizon].to_vec(),
                f: bp.f[..horizon].to_vec(),
                policies: bp.policies[..horizon].to_vec(),
            })
        }
    }
}

fn window_value<T: Real>(
    omega: &VariationalParams<T>,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    model: &PolicyModel<T>,
    window: &super::Window,
) -> Result<T> {
    if window.actions.is_some() {
        return complete_data_loglik(window, params, &model.policies);
    }
    let mut total = T::zero();
    for t in 0..window.horizon() {
        let k = model.at(t);
        let y = lift_v::<T>(&window.states[t]);
        let y1 = lift_v::<T>(&window.states[t + 1]);
        total += transition_free_energy(omega, params, prior, &model.g[k], &model.f[k], &model.points[k], &y, &y1)?
            .total();
    }
    Ok(total)
}

/// `𝓕_b`: free energy summed over the windows `idx` (complete-data
/// log-likelihood for windows with observed actions).
pub fn batch_free_energy<T: Real>(
    omega: &VariationalParams<T>,
    params: &ModelParams<T>,
    prior: &GaussianPolicy<T>,
    model: &PolicyModel<T>,
    batch: &TransitionBatch,
    idx: &[usize],
) -> Result<T> {
    let values: Vec<T> = if idx.len() >= 256 {
        idx.par_iter()
            .map(|&i| window_value(omega, params, prior, model, &batch.windows[i]))
            .collect::<Result<_>>()?
    } else {
        idx.iter()
            .map(|&i| window_value(omega, params, prior, model, &batch.windows[i]))
            .collect::<Result<_>>()?
    };
    let total = values.into_iter().fold(T::zero(), |a, b| a + b);
    if !total.re().is_finite() {
        return Err(Error::NonFinite("batch free energy".into()));
    }
    Ok(total)
}

/// Linearization points from the current recognition means over `idx`.
fn compute_points(
    mode: EmMode,
    omega: &VariationalParams,
    batch: &TransitionBatch,
    idx: &[usize],
) -> Vec<LinearizationPoint> {
    let horizon = batch.windows[idx[0]].horizon();
    let (n_a, n_y) = (omega.n_a(), omega.n_y());
    let slots = match mode {
        EmMode::Market => 1,
        EmMode::Investor => horizon + 1,
    };
    let mut a_sum = vec![DVector::<f64>::zeros(n_a); slots];
    let mut y_sum = vec![DVector::<f64>::zeros(n_y); slots];
    let mut count = vec![0.0; slots];
    for &i in idx {
        let w = &batch.windows[i];
        for t in 0..=horizon {
            let k = match mode {
                EmMode::Market if t == horizon => continue,
                EmMode::Market => 0,
                EmMode::Investor => t,
            };
            let y = &w.states[t];
            let a = match (&w.actions, t < horizon) {
                (Some(acts), true) => acts[t].clone(),
                _ => omega.action_mean(y),
            };
            let yb = if t < horizon {
                marginal_ybar(omega, y, &w.states[t + 1]).0
            } else {
                y.clone()
            };
            a_sum[k] += a;
            y_sum[k] += yb;
            count[k] += 1.0;
        }
    }
    (0..slots)
        .map(|k| {
            let y_bar = &y_sum[k] / count[k];
            LinearizationPoint {
                a_bar: &a_sum[k] / count[k],
                y_bar_next: y_bar.clone(),
                y_bar,
            }
        })
        .collect()
}

/// One line of the diagnostics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDiag {
    pub iteration: usize,
    pub free_energy: f64,
    pub grad_norm_omega: f64,
    pub grad_norm_theta: f64,
    pub step_omega: f64,
    pub step_theta: f64,
    pub point_refreshed: bool,
}

impl fmt::Display for IterationDiag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {} F_b {:.12e} grad_omega {:.3e} grad_theta {:.3e} step_omega {:.3e} step_theta {:.3e} refresh {}",
            self.iteration,
            self.free_energy,
            self.grad_norm_omega,
            self.grad_norm_theta,
            self.step_omega,
            self.step_theta,
            u8::from(self.point_refreshed)
        )
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub mode: EmMode,
    pub theta: ModelParams,
    pub omega: VariationalParams,
    /// Reference policy, fixed for the run.
    pub prior: GaussianPolicy,
    pub model: PolicyModel,
    /// Linearization points `0..=T` (a single point in market mode).
    pub points: Vec<LinearizationPoint>,
    pub history: Vec<f64>,
    pub step_omega: f64,
    pub step_theta: f64,
    pub batch_size: usize,
    pub iteration: usize,
    map: ThetaMap,
}

impl EmState {
    /// Initial state: `ω` at the prior, points from the full batch.
    pub fn new(
        mode: EmMode,
        theta: ModelParams,
        prior: GaussianPolicy,
        batch: &TransitionBatch,
        cfg: &EmConfig,
        w_mask: Option<&DMatrix<bool>>,
    ) -> Result<Self> {
        theta.validate()?;
        prior.validate()?;
        batch.validate(theta.n_assets(), theta.n_y())?;
        if mode == EmMode::Market && batch.windows[0].horizon() != 1 {
            return Err(Error::Data("market mode expects one-step transitions".into()));
        }
        let omega = VariationalParams::init(&prior, theta.n_y(), cfg.encoder_var, cfg.delta_ratio);
        if omega.jitter_ratio() > cfg.max_delta_ratio {
            return Err(Error::InvalidParameter(format!(
                "Tr Sigma_delta / Tr Sigma_a = {} exceeds {}",
                omega.jitter_ratio(),
                cfg.max_delta_ratio
            )));
        }
        omega.validate()?;
        let map = ThetaMap::new(&theta, w_mask, cfg.fit)?;
        let all: Vec<usize> = (0..batch.len()).collect();
        let points = compute_points(mode, &omega, batch, &all);
        let model = solve_policy_model(mode, &theta, &prior, &points, &cfg.stationary)?;
        Ok(EmState {
            mode,
            theta,
            omega,
            prior,
            model,
            points,
            history: Vec::new(),
            step_omega: cfg.step_omega,
            step_theta: cfg.step_theta,
            batch_size: cfg.batch_size.unwrap_or(batch.len()).clamp(1, batch.len()),
            iteration: 0,
            map,
        })
    }

    /// Policy at the first step of a window.
    pub fn policy(&self) -> &GaussianPolicy {
        &self.model.policies[0]
    }

    pub fn g(&self) -> &QuadraticG {
        &self.model.g[0]
    }

    pub fn f(&self) -> &QuadraticF {
        &self.model.f[0]
    }

    pub fn theta_map(&self) -> &ThetaMap {
        &self.map
    }

    pub fn free_energy(&self, batch: &TransitionBatch, idx: &[usize]) -> Result<f64> {
        batch_free_energy(&self.omega, &self.theta, &self.prior, &self.model, batch, idx)
    }
}

fn apply_rule(
    rule: UpdateRule,
    x: &DVector<f64>,
    f_x: f64,
    grad: &DVector<f64>,
    step: f64,
    max_halvings: usize,
    mut value: impl FnMut(&DVector<f64>) -> Option<f64>,
) -> Result<(DVector<f64>, f64, f64)> {
    match rule {
        UpdateRule::Monotone => {
            let s = ascent_step(&mut value, x, f_x, grad, step, max_halvings);
            let next = if s.accepted {
                (s.step * 2.0).min(1e6)
            } else {
                (step * 0.5f64.powi(max_halvings as i32)).max(1e-300)
            };
            Ok((s.x, s.value, next))
        }
        UpdateRule::AsWritten => {
            let xn = x * (1.0 - step) + grad * step;
            let v = value(&xn).ok_or_else(|| Error::NonFinite("free energy after update".into()))?;
            Ok((xn, v, step))
        }
    }
}

/// Result of one E- or M-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

/// Update the action block of `ω` on the windows `idx`. Windows with observed
/// actions do not depend on `ω` and leave it unchanged.
pub fn e_step(state: &mut EmState, batch: &TransitionBatch, idx: &[usize], cfg: &EmConfig) -> Result<StepInfo> {
    let f0 = state.free_energy(batch, idx)?;
    if idx.iter().all(|&i| batch.windows[i].actions.is_some()) {
        return Ok(StepInfo {
            value: f0,
            grad_norm: 0.0,
            step: state.step_omega,
        });
    }
    let lay = OmegaLayout {
        n_a: state.omega.n_a(),
        n_y: state.omega.n_y(),
    };
    let x = lay.pack(&state.omega)?;
    let sd = state.omega.sigma_delta.clone();
    let (params, prior, model) = (&state.theta, &state.prior, &state.model);
    let value = |v: &[f64]| batch_free_energy(&lay.unpack::<f64>(v, &sd), params, prior, model, batch, idx);
    let (pd, prd, md) = (params.lift::<Dual64>(), prior.lift::<Dual64>(), model.lift::<Dual64>());
    let value_d = |v: &[Dual64]| batch_free_energy(&lay.unpack::<Dual64>(v, &sd), &pd, &prd, &md, batch, idx);
    let grad = gradient(cfg.grad, &x, 0..lay.action_len(), value, value_d)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("E-step gradient".into()));
    }
    let xv = DVector::from_vec(x);
    let (xn, v, next) = apply_rule(cfg.rule, &xv, f0, &grad, state.step_omega, cfg.max_halvings, |c| {
        value(c.as_slice()).ok()
    })?;
    state.omega = lay.unpack::<f64>(xn.as_slice(), &sd);
    let used = state.step_omega;
    state.step_omega = next;
    Ok(StepInfo {
        value: v,
        grad_norm: grad.norm(),
        step: used,
    })
}

/// Update `θ` on the windows `idx` at fixed `ω` and linearization points, then
/// refresh G, F and the policy.
pub fn m_step(state: &mut EmState, batch: &TransitionBatch, idx: &[usize], cfg: &EmConfig) -> Result<StepInfo> {
    let f0 = state.free_energy(batch, idx)?;
    let map = state.map.clone();
    let x = map.pack(&state.theta);
    let points = state.points.clone();
    let mode = state.mode;
    let (omega, prior) = (&state.omega, &state.prior);
    let value = |v: &[f64]| -> Result<f64> {
        let p = map.unpack::<f64>(v);
        let model = solve_policy_model(mode, &p, prior, &points, &cfg.stationary)?;
        batch_free_energy(omega, &p, prior, &model, batch, idx)
    };
    let (od, prd) = (omega.lift::<Dual64>(), prior.lift::<Dual64>());
    let pts_d: Vec<LinearizationPoint<Dual64>> = points.iter().map(|p| p.lift()).collect();
    let value_d = |v: &[Dual64]| -> Result<Dual64> {
        let p = map.unpack::<Dual64>(v);
        let model = solve_policy_model(mode, &p, &prd, &pts_d, &cfg.stationary)?;
        batch_free_energy(&od, &p, &prd, &model, batch, idx)
    };
    let grad = gradient(cfg.grad, &x, 0..x.len(), value, value_d)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("M-step gradient".into()));
    }
    let xv = DVector::from_vec(x);
    let (xn, v, next) = apply_rule(cfg.rule, &xv, f0, &grad, state.step_theta, cfg.max_halvings, |c| {
        value(c.as_slice()).ok()
    })?;
    state.theta = map.unpack::<f64>(xn.as_slice());
    state.model = solve_policy_model(mode, &state.theta, prior, &points, &cfg.stationary)?;
    let used = state.step_theta;
    state.step_theta = next;
    Ok(StepInfo {
        value: v,
        grad_norm: grad.norm(),
        step: used,
    })
}

/// Move the linearization points to the current recognition means; kept only
/// if `𝓕_b` on `idx` does not decrease.
pub fn refresh_point(state: &mut EmState, batch: &TransitionBatch, idx: &[usize], cfg: &EmConfig) -> Result<bool> {
    let f0 = state.free_energy(batch, idx)?;
    let points = compute_points(state.mode, &state.omega, batch, idx);
    let Ok(model) = solve_policy_model(state.mode, &state.theta, &state.prior, &points, &cfg.stationary) else {
        return Ok(false);
    };
    match batch_free_energy(&state.omega, &state.theta, &state.prior, &model, batch, idx) {
        Ok(v) if v >= f0 => {
            state.model = model;
            state.points = points;
            Ok(true)
        }
        _ => Ok(false),
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub state: EmState,
    pub diagnostics: Vec<IterationDiag>,
    pub converged: bool,
}

impl EmState {
    /// Run EM from the current state; `on_iter` sees each diagnostics line and
    /// the updated state.
    pub fn run(
        mut self,
        batch: &TransitionBatch,
        cfg: &EmConfig,
        mut on_iter: impl FnMut(&IterationDiag, &EmState),
    ) -> Result<EmResult> {
        let n = batch.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cursor = n;
        let mut quiet = 0;
        let mut diagnostics = Vec::new();
        let mut converged = false;
        for _ in 0..cfg.max_iter {
            let k = self.iteration + 1;
            let idx: Vec<usize> = if self.batch_size >= n {
                (0..n).collect()
            } else {
                if cursor + self.batch_size > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let s = order[cursor..cursor + self.batch_size].to_vec();
                cursor += self.batch_size;
                s
            };
            let wrap = |e: Error| Error::Em {
                iteration: k,
                source: Box::new(e),
            };
            let before = self.free_energy(batch, &idx).map_err(wrap)?;
            let refreshed = if cfg.refresh_point {
                refresh_point(&mut self, batch, &idx, cfg).map_err(wrap)?
            } else {
                false
            };
            let e = e_step(&mut self, batch, &idx, cfg).map_err(wrap)?;
            let m = m_step(&mut self, batch, &idx, cfg).map_err(wrap)?;
            self.iteration = k;
            self.history.push(m.value);
            let diag = IterationDiag {
                iteration: k,
                free_energy: m.value,
                grad_norm_omega: e.grad_norm,
                grad_norm_theta: m.grad_norm,
                step_omega: e.step,
                step_theta: m.step,
                point_refreshed: refreshed,
            };
            on_iter(&diag, &self);
            diagnostics.push(diag);
            let rel = (m.value - before).abs() / before.abs().max(1e-300);
            quiet = if rel < cfg.tol { quiet + 1 } else { 0 };
            if quiet >= cfg.patience {
                converged = true;
                break;
            }
        }
        Ok(EmResult {
            state: self,
            diagnostics,
            converged,
        })
    }
}

/// Market-mode EM over one-step transitions with a stationary G/F.
pub fn ih_if_run(
    theta: ModelParams,
    prior: GaussianPolicy,
    batch: &TransitionBatch,
    cfg: &EmConfig,
    w_mask: Option<&DMatrix<bool>>,
) -> Result<EmResult> {
    EmState::new(EmMode::Market, theta, prior, batch, cfg, w_mask)?.run(batch, cfg, |_, _| {})
}

/// Investor-mode EM over `T`-step windows with a backward pass per iteration.
pub fn single_investor_run(
    theta: ModelParams,
    prior: GaussianPolicy,
    batch: &TransitionBatch,
    cfg: &EmConfig,
    w_mask: Option<&DMatrix<bool>>,
) -> Result<EmResult> {
    EmState::new(EmMode::Investor, theta, prior, batch, cfg, w_mask)?.run(batch, cfg, |_, _| {})
}
