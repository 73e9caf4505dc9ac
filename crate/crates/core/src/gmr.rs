//! Multivariate geometric mean reversion: simulation, one-dimensional forms,
//! Gaussian likelihood and per-asset maximum-likelihood calibration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::optim::{projected_bfgs, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Econometric parameters of the market model.
///
/// Per step the relative change is
/// `Δx/x = φ + (1+φ)(r_f + w z) − κΔt·x + √σ²·ε`, so the mean level is
/// `θ(z) = [φ + (1+φ)(r_f + w z)] / (κΔt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrParams {
    pub kappa: DVector<f64>,
    /// `N × (K·N)` loadings.
    pub w: DMatrix<f64>,
    /// Per-step residual variances `σ_i²` (diagonal of `Σ_x`).
    pub sigma2: DVector<f64>,
    pub phi: DVector<f64>,
    pub r_f: f64,
    pub dt: f64,
}

impl GmrParams {
    /// Reduced-form parameters with `φ = 0`, `r_f = 0`.
    pub fn new(kappa: DVector<f64>, w: DMatrix<f64>, sigma2: DVector<f64>, dt: f64) -> Result<Self> {
        let n = kappa.len();
        let p = GmrParams {
            kappa,
            w,
            sigma2,
            phi: DVector::zeros(n),
            r_f: 0.0,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    /// From impact `μ`, policy slope `φ`, return loadings and residual covariance.
    pub fn from_structural(
        mu: &DVector<f64>,
        phi: &DVector<f64>,
        r_f: f64,
        w: &DMatrix<f64>,
        sigma_r: &DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let n = mu.len();
        check_dim("structural phi", n, phi.len())?;
        check_dim("structural Sigma_r", n, sigma_r.nrows())?;
        if mu.iter().chain(phi.iter()).any(|v| *v == 0.0) {
            return Err(Error::LogNormalLimit);
        }
        if mu.iter().chain(phi.iter()).any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter("mu and phi must be positive".into()));
        }
        let kappa = DVector::from_fn(n, |i, _| mu[i] * phi[i] * (1.0 + phi[i]) / dt);
        let sigma2 = DVector::from_fn(n, |i, _| (1.0 + phi[i]).powi(2) * sigma_r[(i, i)]);
        let p = GmrParams {
            kappa,
            w: w.clone(),
            sigma2,
            phi: phi.clone(),
            r_f,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    /// The `μ, φ → 0` limit: log-normal returns with signals.
    pub fn lognormal_limit(w: DMatrix<f64>, sigma2: DVector<f64>, r_f: f64, dt: f64) -> Result<Self> {
        let n = w.nrows();
        let p = GmrParams {
            kappa: DVector::zeros(n),
            w,
            sigma2,
            phi: DVector::zeros(n),
            r_f,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_assets(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_assets();
        check_dim("GMR loadings rows", n, self.w.nrows())?;
        check_dim("GMR variances", n, self.sigma2.len())?;
        check_dim("GMR phi", n, self.phi.len())?;
        if self.sigma2.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidParameter("sigma^2 must be >= 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        Ok(())
    }

    /// Implied impact `μ = κΔt / (φ(1+φ))`.
    pub fn mu(&self) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n_assets());
        for i in 0..self.n_assets() {
            let d = self.phi[i] * (1.0 + self.phi[i]);
            if d == 0.0 {
                return Err(Error::UndefinedLevel { asset: i });
            }
            out[i] = self.kappa[i] * self.dt / d;
        }
        Ok(out)
    }

    /// `κΔt·θ(z) = φ + (1+φ)(r_f + w z)`.
    pub fn level_numerator(&self, z: &DVector<f64>) -> DVector<f64> {
        let wz = &self.w * z;
        DVector::from_fn(self.n_assets(), |i, _| {
            self.phi[i] + (1.0 + self.phi[i]) * (self.r_f + wz[i])
        })
    }

    /// Expected relative change over one step.
    pub fn relative_drift(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let num = self.level_numerator(z);
        DVector::from_fn(self.n_assets(), |i, _| num[i] - self.kappa[i] * self.dt * x[i])
    }
}

/// Mean level `θ(z)`.
pub fn theta_level(params: &GmrParams, z: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("signal vector", params.w.ncols(), z.len())?;
    let num = params.level_numerator(z);
    let mut out = DVector::zeros(params.n_assets());
    for i in 0..params.n_assets() {
        let k = params.kappa[i] * params.dt;
        if k == 0.0 {
            return Err(Error::UndefinedLevel { asset: i });
        }
        out[i] = num[i] / k;
    }
    Ok(out)
}

/// Observed or simulated caps and the signals aligned with them.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    /// `T × N`.
    pub x: DMatrix<f64>,
    /// `T × (K·N)`; row `t` is the signal known at `t`.
    pub z: DMatrix<f64>,
    pub dt: f64,
    /// Set when any simulated cap reached a non-positive value.
    pub nonpositive: bool,
}

impl MarketPath {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn x_at(&self, t: usize) -> DVector<f64> {
        self.x.row(t).transpose()
    }

    pub fn z_at(&self, t: usize) -> DVector<f64> {
        self.z.row(t).transpose()
    }
}

/// Standard normal draws for `steps × n`, in step-major order.
pub fn normal_draws(n: usize, steps: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_row_iterator(steps, n, (0..steps * n).map(|_| StandardNormal.sample(&mut rng)))
}

fn check_sim_inputs(params: &GmrParams, x0: &DVector<f64>, z_path: &DMatrix<f64>, steps: usize) -> Result<()> {
    params.validate()?;
    check_dim("initial caps", params.n_assets(), x0.len())?;
    check_dim("signal width", params.w.ncols(), z_path.ncols())?;
    if x0.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("initial caps must be > 0".into()));
    }
    if z_path.nrows() < steps + 1 && steps > 0 {
        return Err(Error::Range {
            what: "signal path",
            index: steps,
            len: z_path.nrows(),
        });
    }
    Ok(())
}

/// Simulate `steps` transitions from `x0` using signal rows `0..=steps`.
pub fn simulate_gmr(
    params: &GmrParams,
    x0: &DVector<f64>,
    z_path: &DMatrix<f64>,
    seed: u64,
    steps: usize,
) -> Result<MarketPath> {
    check_sim_inputs(params, x0, z_path, steps)?;
    let eps = normal_draws(params.n_assets(), steps, seed);
    simulate_gmr_with_noise(params, x0, z_path, &eps)
}

/// As [`simulate_gmr`] with explicit standard-normal draws, one row per step.
pub fn simulate_gmr_with_noise(
    params: &GmrParams,
    x0: &DVector<f64>,
    z_path: &DMatrix<f64>,
    eps: &DMatrix<f64>,
) -> Result<MarketPath> {
    let steps = eps.nrows();
    check_sim_inputs(params, x0, z_path, steps)?;
    let n = params.n_assets();
    let sd = params.sigma2.map(f64::sqrt);
    let mut x = DMatrix::zeros(steps + 1, n);
    x.row_mut(0).copy_from(&x0.transpose());
    let mut cur = x0.clone();
    let mut nonpositive = false;
    for t in 0..steps {
        let drift = params.relative_drift(&cur, &z_path.row(t).transpose());
        for i in 0..n {
            cur[i] += cur[i] * (drift[i] + sd[i] * eps[(t, i)]);
            nonpositive |= cur[i] <= 0.0;
        }
        x.row_mut(t + 1).copy_from(&cur.transpose());
    }
    let rows = (steps + 1).min(z_path.nrows());
    Ok(MarketPath {
        x,
        z: z_path.rows(0, rows).into_owned(),
        dt: params.dt,
        nonpositive,
    })
}

/// Log-normal returns with signals, `x' = x(1 + r_f + w z + σε)`, from explicit draws.
pub fn simulate_lognormal_with_noise(
    w: &DMatrix<f64>,
    sigma2: &DVector<f64>,
    r_f: f64,
    x0: &DVector<f64>,
    z_path: &DMatrix<f64>,
    eps: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = x0.len();
    check_dim("log-normal loadings", n, w.nrows())?;
    check_dim("log-normal variances", n, sigma2.len())?;
    let steps = eps.nrows();
    let mut x = DMatrix::zeros(steps + 1, n);
    x.row_mut(0).copy_from(&x0.transpose());
    for t in 0..steps {
        let wz = w * z_path.row(t).transpose();
        for i in 0..n {
            let ret = r_f + wz[i] + sigma2[i].sqrt() * eps[(t, i)];
            x[(t + 1, i)] = x[(t, i)] * (1.0 + ret);
        }
    }
    Ok(x)
}

/// Discretization of the one-dimensional process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme1d {
    /// Euler on `dx = κx(θ − x)dt + σx dW`.
    Direct,
    /// Euler on `s = 1/x`.
    Reciprocal,
    /// Euler on `s = log x`.
    Log,
}

impl std::str::FromStr for Scheme1d {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Scheme1d::Direct),
            "reciprocal" => Ok(Scheme1d::Reciprocal),
            "log" => Ok(Scheme1d::Log),
            other => Err(Error::InvalidParameter(format!("unknown scheme {other:?}"))),
        }
    }
}

/// One-dimensional process parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gmr1d {
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
}

impl Gmr1d {
    /// One Euler step of the chosen scheme in `x` units, driven by `dw ~ N(0, dt)`.
    pub fn step(&self, x: f64, dt: f64, dw: f64, scheme: Scheme1d) -> f64 {
        let Gmr1d { kappa, theta, sigma } = *self;
        match scheme {
            Scheme1d::Direct => x + kappa * x * (theta - x) * dt + sigma * x * dw,
            Scheme1d::Reciprocal => {
                let s = 1.0 / x;
                let s1 = s + (kappa - (kappa * theta - sigma * sigma) * s) * dt - sigma * s * dw;
                1.0 / s1
            }
            Scheme1d::Log => {
                let s = x.ln();
                let s1 = s + kappa * (theta - sigma * sigma / (2.0 * kappa) - x) * dt + sigma * dw;
                s1.exp()
            }
        }
    }

    /// Extrema of the stationary density of `κx`: `0` and `κθ − νσ²/2`,
    /// `ν = 2` (Ito) or `1` (Stratonovich); the second exists only when positive.
    pub fn stationary_extrema(&self, ito: bool) -> (f64, Option<f64>) {
        let nu = if ito { 2.0 } else { 1.0 };
        let s2 = self.kappa * self.theta - nu * self.sigma * self.sigma / 2.0;
        (0.0, (s2 > 0.0).then_some(s2))
    }
}

/// Simulate and visit every state after `x0`; returns the terminal value.
pub fn simulate_gmr_1d_visit(
    p: &Gmr1d,
    x0: f64,
    dt: f64,
    steps: usize,
    seed: u64,
    scheme: Scheme1d,
    mut visit: impl FnMut(f64),
) -> Result<f64> {
    if !(x0 > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter("need x0 > 0 and dt > 0".into()));
    }
    if scheme == Scheme1d::Log && p.kappa == 0.0 {
        return Err(Error::InvalidParameter("log scheme needs kappa != 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = dt.sqrt();
    let mut x = x0;
    for _ in 0..steps {
        let e: f64 = StandardNormal.sample(&mut rng);
        x = p.step(x, dt, sq * e, scheme);
        visit(x);
    }
    Ok(x)
}

/// Path of length `steps + 1` starting at `x0`.
pub fn simulate_gmr_1d(
    p: &Gmr1d,
    x0: f64,
    dt: f64,
    steps: usize,
    seed: u64,
    scheme: Scheme1d,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0);
    simulate_gmr_1d_visit(p, x0, dt, steps, seed, scheme, |x| out.push(x))?;
    Ok(out)
}

/// Residual definition for the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualForm {
    /// `v = Δx/x − drift`.
    #[default]
    Arithmetic,
    /// `v = log(x'/x) − drift + σ²/2`.
    Log,
}

impl std::str::FromStr for ResidualForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(ResidualForm::Arithmetic),
            "log" => Ok(ResidualForm::Log),
            other => Err(Error::InvalidParameter(format!("unknown residual form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    pub reg_lambda: f64,
    pub form: ResidualForm,
    pub bfgs: BfgsOptions,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            reg_lambda: 1e-2,
            form: ResidualForm::Arithmetic,
            bfgs: BfgsOptions {
                max_iter: 1000,
                grad_tol: 1e-6,
                f_tol: 1e-15,
            },
        }
    }
}

fn residual(form: ResidualForm, x: f64, x1: f64, drift: f64, sigma2: f64) -> Result<f64> {
    match form {
        ResidualForm::Arithmetic => Ok((x1 - x) / x - drift),
        ResidualForm::Log => {
            if !(x > 0.0 && x1 > 0.0) {
                return Err(Error::Domain { asset: 0, value: x.min(x1) });
            }
            Ok((x1 / x).ln() - drift + 0.5 * sigma2)
        }
    }
}

/// Per-step residuals `v_t`, `(T−1) × N`.
pub fn residuals(params: &GmrParams, path: &MarketPath, form: ResidualForm) -> Result<DMatrix<f64>> {
    let t_len = path.len();
    let n = params.n_assets();
    check_dim("path width", n, path.x.ncols())?;
    if t_len < 2 {
        return Err(Error::Data("need at least 2 observations".into()));
    }
    if path.z.nrows() < t_len - 1 {
        return Err(Error::Range {
            what: "signal path",
            index: t_len - 2,
            len: path.z.nrows(),
        });
    }
    let mut v = DMatrix::zeros(t_len - 1, n);
    for t in 0..t_len - 1 {
        let x = path.x_at(t);
        let drift = params.relative_drift(&x, &path.z_at(t));
        for i in 0..n {
            v[(t, i)] = residual(form, x[i], path.x[(t + 1, i)], drift[i], params.sigma2[i])
                .map_err(|e| match e {
                    Error::Domain { value, .. } => Error::Domain { asset: i, value },
                    e => e,
                })?;
        }
    }
    Ok(v)
}

/// `Σ_t [½ vᵀΣ_x⁻¹v + ½ log((2π)^N |Σ_x|)]` over all one-step transitions.
pub fn neg_log_likelihood(params: &GmrParams, path: &MarketPath, form: ResidualForm) -> Result<f64> {
    let v = residuals(params, path, form)?;
    let mut nll = 0.0;
    for i in 0..params.n_assets() {
        let s2 = params.sigma2[i];
        if !(s2 > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma^2 of asset {i} must be > 0")));
        }
        let ss: f64 = v.column(i).iter().map(|r| r * r).sum();
        nll += 0.5 * ss / s2 + 0.5 * v.nrows() as f64 * (LN_2PI + s2.ln());
    }
    Ok(nll)
}

/// Inputs of one asset's fit: relative moves and regressors.
#[derive(Debug, Clone)]
struct AssetData {
    x: Vec<f64>,
    x1: Vec<f64>,
    z: Vec<Vec<f64>>,
    phi: f64,
    r_f: f64,
    dt: f64,
    xbar: f64,
    zbar: Vec<f64>,
}

impl AssetData {
    /// Parameters are `[κ, w_1..w_K, log σ²]`.
    fn objective(&self, p: &[f64], form: ResidualForm, reg: f64) -> (f64, Vec<f64>) {
        let k = self.z.first().map_or(0, |r| r.len());
        let kappa = p[0];
        let w = &p[1..1 + k];
        let ls = p[1 + k];
        let s2 = ls.exp();
        let mut f = 0.0;
        let mut g = vec![0.0; p.len()];
        for t in 0..self.x.len() {
            let wz: f64 = w.iter().zip(&self.z[t]).map(|(a, b)| a * b).sum();
            let drift = self.phi + (1.0 + self.phi) * (self.r_f + wz) - kappa * self.dt * self.x[t];
            let v = match form {
                ResidualForm::Arithmetic => (self.x1[t] - self.x[t]) / self.x[t] - drift,
                ResidualForm::Log => (self.x1[t] / self.x[t]).ln() - drift + 0.5 * s2,
            };
            let r = v / s2;
            f += 0.5 * v * r + 0.5 * (LN_2PI + ls);
            g[0] += r * self.dt * self.x[t];
            for j in 0..k {
                g[1 + j] -= r * (1.0 + self.phi) * self.z[t][j];
            }
            g[1 + k] += -0.5 * v * r + 0.5;
            if form == ResidualForm::Log {
                g[1 + k] += 0.5 * v;
            }
        }
        let sw: f64 = w.iter().sum::<f64>() - 1.0;
        f += reg * sw * sw;
        for j in 0..k {
            g[1 + j] += 2.0 * reg * sw;
        }
        (f, g)
    }

    /// `κΔt` from the internal intercept `a = mean(κΔt·θ) − κΔt·mean(x)`.
    fn kappa_dt(&self, q: &[f64]) -> f64 {
        let wz: f64 = self.zbar.iter().zip(&q[1..]).map(|(a, b)| a * b).sum();
        (self.phi + (1.0 + self.phi) * (self.r_f + wz) - q[0]) / self.xbar
    }

    fn to_internal(&self, p: &[f64]) -> Vec<f64> {
        let wz: f64 = self.zbar.iter().zip(&p[1..]).map(|(a, b)| a * b).sum();
        let mut q = p.to_vec();
        q[0] = self.phi + (1.0 + self.phi) * (self.r_f + wz) - p[0] * self.dt * self.xbar;
        q
    }

    fn from_internal(&self, q: &[f64]) -> Vec<f64> {
        let mut p = q.to_vec();
        p[0] = self.kappa_dt(q) / self.dt;
        p
    }

    /// As [`AssetData::objective`] in the internal coordinates `[a, w.., log σ²]`,
    /// which keep the level and the loadings from trading off along a flat valley.
    fn objective_internal(&self, q: &[f64], form: ResidualForm, reg: f64) -> (f64, Vec<f64>) {
        let p = self.from_internal(q);
        let (f, mut g) = self.objective(&p, form, reg);
        let gc = g[0] / self.dt;
        g[0] = -gc / self.xbar;
        for (j, zb) in self.zbar.iter().enumerate() {
            g[1 + j] += gc * (1.0 + self.phi) * zb / self.xbar;
        }
        (f, g)
    }
}

/// One asset's fitted values.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetFit {
    pub kappa: f64,
    pub w: Vec<f64>,
    pub sigma2: f64,
    /// Penalized objective at the optimum.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Calibration output; `params` holds every asset's estimates even when some
/// failed to converge.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrFit {
    pub params: GmrParams,
    pub assets: Vec<AssetFit>,
}

impl GmrFit {
    pub fn unconverged(&self) -> Vec<usize> {
        (0..self.assets.len()).filter(|&i| !self.assets[i].converged).collect()
    }
}

/// Starting point and structural inputs of a calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibInit {
    /// `NaN` entries start at the value that puts the mean level on the mean cap.
    pub kappa: DVector<f64>,
    pub w: DMatrix<f64>,
    /// Non-positive entries are replaced by the mean squared residual at the start.
    pub sigma2: DVector<f64>,
    pub phi: DVector<f64>,
    pub r_f: f64,
    pub dt: f64,
}

impl CalibInit {
    /// Equal weights summing to one on the mask, data-driven `κ` and `σ²`.
    pub fn default_for(mask: &DMatrix<f64>, dt: f64) -> Self {
        let n = mask.nrows();
        let mut w = mask.clone();
        for i in 0..n {
            let cnt = mask.row(i).iter().filter(|v| **v != 0.0).count().max(1) as f64;
            for j in 0..mask.ncols() {
                if mask[(i, j)] != 0.0 {
                    w[(i, j)] = 1.0 / cnt;
                }
            }
        }
        CalibInit {
            kappa: DVector::from_element(n, f64::NAN),
            w,
            sigma2: DVector::zeros(n),
            phi: DVector::zeros(n),
            r_f: 0.0,
            dt,
        }
    }
}

fn asset_columns(mask: &DMatrix<f64>, i: usize) -> Vec<usize> {
    (0..mask.ncols()).filter(|&j| mask[(i, j)] != 0.0).collect()
}

fn asset_data(path: &MarketPath, mask: &DMatrix<f64>, init: &CalibInit, i: usize) -> Result<(AssetData, Vec<usize>)> {
    let cols = asset_columns(mask, i);
    let t_len = path.len();
    if t_len < 2 {
        return Err(Error::Data(format!("asset {i}: need at least 2 observations")));
    }
    let mut d = AssetData {
        x: Vec::with_capacity(t_len - 1),
        x1: Vec::with_capacity(t_len - 1),
        z: Vec::with_capacity(t_len - 1),
        phi: init.phi[i],
        r_f: init.r_f,
        dt: init.dt,
        xbar: 0.0,
        zbar: Vec::new(),
    };
    for t in 0..t_len - 1 {
        let (x, x1) = (path.x[(t, i)], path.x[(t + 1, i)]);
        if !(x > 0.0) {
            return Err(Error::Domain { asset: i, value: x });
        }
        d.x.push(x);
        d.x1.push(x1);
        d.z.push(cols.iter().map(|&c| path.z[(t, c)]).collect());
    }
    let n = d.x.len() as f64;
    d.xbar = d.x.iter().sum::<f64>() / n;
    d.zbar = (0..cols.len()).map(|j| d.z.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    Ok((d, cols))
}

fn initial_vector(d: &AssetData, init: &CalibInit, i: usize, cols: &[usize]) -> DVector<f64> {
    let k = cols.len();
    let mut p = DVector::zeros(k + 2);
    for (j, &c) in cols.iter().enumerate() {
        p[1 + j] = init.w[(i, c)].max(0.0);
    }
    p[0] = if init.kappa[i].is_nan() {
        let w = &p.as_slice()[1..1 + k];
        let num: f64 = d
            .z
            .iter()
            .map(|zt| d.phi + (1.0 + d.phi) * (d.r_f + w.iter().zip(zt).map(|(a, b)| a * b).sum::<f64>()))
            .sum();
        num / (d.dt * d.x.iter().sum::<f64>().max(f64::MIN_POSITIVE))
    } else {
        init.kappa[i]
    };
    let s2 = if init.sigma2[i] > 0.0 {
        init.sigma2[i]
    } else {
        let w = &p.as_slice()[1..1 + k];
        let ss: f64 = (0..d.x.len())
            .map(|t| {
                let wz: f64 = w.iter().zip(&d.z[t]).map(|(a, b)| a * b).sum();
                let drift = d.phi + (1.0 + d.phi) * (d.r_f + wz) - p[0] * d.dt * d.x[t];
                ((d.x1[t] - d.x[t]) / d.x[t] - drift).powi(2)
            })
            .sum();
        (ss / d.x.len() as f64).max(1e-12)
    };
    p[1 + k] = s2.ln();
    DVector::from_vec(d.to_internal(p.as_slice()))
}

fn bounds(k: usize) -> Vec<Option<f64>> {
    let mut b = vec![None; k + 2];
    for slot in b.iter_mut().skip(1).take(k) {
        *slot = Some(0.0);
    }
    b
}

/// Penalized NLL of one asset and its gradient, parameters `[κ, w.., log σ²]`.
pub fn asset_objective(
    path: &MarketPath,
    mask: &DMatrix<f64>,
    init: &CalibInit,
    asset: usize,
    p: &[f64],
    config: &CalibConfig,
) -> Result<(f64, Vec<f64>)> {
    let (d, _) = asset_data(path, mask, init, asset)?;
    Ok(d.objective(p, config.form, config.reg_lambda))
}

/// Minimize the penalized NLL per asset with `w ≥ 0`; assets run in parallel.
pub fn calibrate(
    path: &MarketPath,
    mask: &DMatrix<f64>,
    init: &CalibInit,
    config: &CalibConfig,
) -> Result<GmrFit> {
    let n = path.x.ncols();
    check_dim("mask rows", n, mask.nrows())?;
    check_dim("signal width", mask.ncols(), path.z.ncols())?;
    check_dim("initial kappa", n, init.kappa.len())?;
    if config.reg_lambda < 0.0 {
        return Err(Error::InvalidParameter("reg_lambda must be >= 0".into()));
    }
    let fits: Vec<Result<(AssetFit, Vec<usize>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (d, cols) = asset_data(path, mask, init, i)?;
            let k = cols.len();
            let p0 = initial_vector(&d, init, i, &cols);
            let res = projected_bfgs(
                |p| {
                    let (f, g) = d.objective_internal(p.as_slice(), config.form, config.reg_lambda);
                    (f, DVector::from_vec(g))
                },
                &p0,
                &bounds(k),
                &config.bfgs,
            );
            Ok((
                AssetFit {
                    kappa: d.from_internal(res.x.as_slice())[0],
                    w: res.x.rows(1, k).iter().copied().collect(),
                    sigma2: res.x[1 + k].exp(),
                    objective: res.f,
                    iterations: res.iterations,
                    converged: res.converged && res.f.is_finite(),
                },
                cols,
            ))
        })
        .collect();
    let mut kappa = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, mask.ncols());
    let mut sigma2 = DVector::zeros(n);
    let mut assets = Vec::with_capacity(n);
    for (i, r) in fits.into_iter().enumerate() {
        let (fit, cols) = r?;
        kappa[i] = fit.kappa;
        sigma2[i] = fit.sigma2;
        for (j, &c) in cols.iter().enumerate() {
            w[(i, c)] = fit.w[j];
        }
        assets.push(fit);
    }
    Ok(GmrFit {
        params: GmrParams {
            kappa,
            w,
            sigma2,
            phi: init.phi.clone(),
            r_f: init.r_f,
            dt: init.dt,
        },
        assets,
    })
}

/// All assets in one optimization over the stacked parameter vector.
pub fn calibrate_joint(
    path: &MarketPath,
    mask: &DMatrix<f64>,
    init: &CalibInit,
    config: &CalibConfig,
) -> Result<GmrFit> {
    let n = path.x.ncols();
    check_dim("mask rows", n, mask.nrows())?;
    let mut data = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut p0 = Vec::new();
    let mut lower = Vec::new();
    for i in 0..n {
        let (d, cols) = asset_data(path, mask, init, i)?;
        offsets.push(p0.len());
        p0.extend(initial_vector(&d, init, i, &cols).iter());
        lower.extend(bounds(cols.len()));
        data.push((d, cols));
    }
    let res = projected_bfgs(
        |p| {
            let mut f = 0.0;
            let mut g = DVector::zeros(p.len());
            for (i, (d, cols)) in data.iter().enumerate() {
                let o = offsets[i];
                let len = cols.len() + 2;
                let (fi, gi) = d.objective_internal(&p.as_slice()[o..o + len], config.form, config.reg_lambda);
                f += fi;
                g.rows_mut(o, len).copy_from_slice(&gi);
            }
            (f, g)
        },
        &DVector::from_vec(p0),
        &lower,
        &config.bfgs,
    );
    let mut kappa = DVector::zeros(n);
    let mut w = DMatrix::zeros(n, mask.ncols());
    let mut sigma2 = DVector::zeros(n);
    let mut assets = Vec::with_capacity(n);
    for (i, (d, cols)) in data.iter().enumerate() {
        let o = offsets[i];
        let k = cols.len();
        let p = &res.x.as_slice()[o..o + k + 2];
        kappa[i] = d.from_internal(p)[0];
        sigma2[i] = p[1 + k].exp();
        for (j, &c) in cols.iter().enumerate() {
            w[(i, c)] = p[1 + j];
        }
        assets.push(AssetFit {
            kappa: kappa[i],
            w: p[1..1 + k].to_vec(),
            sigma2: sigma2[i],
            objective: d.objective_internal(p, config.form, config.reg_lambda).0,
            iterations: res.iterations,
            converged: res.converged,
        });
    }
    Ok(GmrFit {
        params: GmrParams {
            kappa,
            w,
            sigma2,
            phi: init.phi.clone(),
            r_f: init.r_f,
            dt: init.dt,
        },
        assets,
    })
}

/// Fitted mean level per date, `T × N`; `NaN` where `κ = 0`.
pub fn fitted_levels(params: &GmrParams, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = params.n_assets();
    let mut out = DMatrix::from_element(z.nrows(), n, f64::NAN);
    for t in 0..z.nrows() {
        let num = params.level_numerator(&z.row(t).transpose());
        for i in 0..n {
            let k = params.kappa[i] * params.dt;
            if k != 0.0 {
                out[(t, i)] = num[i] / k;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn theta_trivia() {
        let p = GmrParams::from_structural(
            &dvector![0.5],
            &dvector![1.0],
            0.0,
            &DMatrix::zeros(1, 1),
            &DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        assert_eq!(theta_level(&p, &dvector![0.0]).unwrap()[0], 1.0);
        let p = GmrParams::from_structural(
            &dvector![0.1],
            &dvector![0.5],
            0.0,
            &DMatrix::zeros(1, 1),
            &DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        assert!((p.kappa[0] - 0.075).abs() < 1e-16);
    }

    #[test]
    fn structural_zero_redirects() {
        let e = GmrParams::from_structural(
            &dvector![0.0],
            &dvector![0.0],
            0.0,
            &DMatrix::zeros(1, 1),
            &DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap_err();
        assert_eq!(e, Error::LogNormalLimit);
        let p = GmrParams::lognormal_limit(DMatrix::zeros(1, 1), dvector![1.0], 0.0, 1.0).unwrap();
        assert!(matches!(theta_level(&p, &dvector![0.0]), Err(Error::UndefinedLevel { asset: 0 })));
    }

    #[test]
    fn noiseless_fixed_point() {
        let p = GmrParams::new(dvector![0.2], DMatrix::from_element(1, 1, 0.4), dvector![0.0], 1.0).unwrap();
        let z = DMatrix::from_element(11, 1, 1.0);
        let theta = theta_level(&p, &dvector![1.0]).unwrap()[0];
        let path = simulate_gmr(&p, &dvector![theta], &z, 3, 10).unwrap();
        assert!(path.x.iter().all(|v| (v - theta).abs() < 1e-15));
    }

    #[test]
    fn nll_normalization_only() {
        let p = GmrParams::new(dvector![0.0], DMatrix::zeros(1, 1), dvector![1.0 / (2.0 * std::f64::consts::PI)], 1.0)
            .unwrap();
        let path = MarketPath {
            x: DMatrix::from_element(2, 1, 1.0),
            z: DMatrix::zeros(2, 1),
            dt: 1.0,
            nonpositive: false,
        };
        assert!(neg_log_likelihood(&p, &path, ResidualForm::Arithmetic).unwrap().abs() < 1e-15);
    }

    #[test]
    fn extrema() {
        let p = Gmr1d { kappa: 1.0, theta: 1.0, sigma: 0.5f64.sqrt() };
        let (s1, s2) = p.stationary_extrema(true);
        assert_eq!(s1, 0.0);
        assert!((s2.unwrap() - 0.5).abs() < 1e-15);
        assert!((p.stationary_extrema(false).1.unwrap() - 0.75).abs() < 1e-15);
        let q = Gmr1d { kappa: 0.1, ..p };
        assert_eq!(q.stationary_extrema(true).1, None);
    }

    #[test]
    fn scheme_parse() {
        assert_eq!("log".parse::<Scheme1d>().unwrap(), Scheme1d::Log);
        assert!("milstein".parse::<Scheme1d>().is_err());
    }
}
