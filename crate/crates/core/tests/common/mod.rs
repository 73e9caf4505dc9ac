//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use marketirl::entropy_rl::GaussianPolicy;
use marketirl::gmr::GmrParams;
use marketirl::ModelParams;
use nalgebra::{dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0,1)`.
pub fn std_normal_rule(n: usize) -> Vec<(f64, f64)> {
    let gh = GaussHermite::new(NonZeroUsize::new(n).unwrap());
    let norm = std::f64::consts::PI.sqrt();
    gh.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (x * std::f64::consts::SQRT_2, w / norm))
        .collect()
}

/// `log E[exp(g(X))]` for `X ~ N(mean, cov)` by tensor Gauss-Hermite with `n`
/// nodes per dimension, accumulated in log-sum-exp form.
pub fn log_expect_exp(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, mut g: impl FnMut(&DVector<f64>) -> f64) -> f64 {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("covariance must be SPD").l();
    let rule = std_normal_rule(n);
    let mut idx = vec![0usize; d];
    let mut terms = Vec::with_capacity(n.pow(d as u32));
    loop {
        let mut z = DVector::zeros(d);
        let mut lw = 0.0;
        for k in 0..d {
            z[k] = rule[idx[k]].0;
            lw += rule[idx[k]].1.ln();
        }
        let x = mean + &l * z;
        terms.push(lw + g(&x));
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `E[f(X)]` for `X ~ N(mean, cov)`, tensor Gauss-Hermite.
pub fn expect(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, mut f: impl FnMut(&DVector<f64>) -> f64) -> f64 {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("covariance must be SPD").l();
    let rule = std_normal_rule(n);
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let mut z = DVector::zeros(d);
        let mut w = 1.0;
        for k in 0..d {
            z[k] = rule[idx[k]].0;
            w *= rule[idx[k]].1;
        }
        total += w * f(&(mean + &l * z));
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            return total;
        }
    }
}

/// Composite Simpson on `[a, b]` with `m` (even) panels.
pub fn simpson(a: f64, b: f64, m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for i in 1..m {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += c * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `1 + e_t` with `e_t = γ e_{t−1} + (1−γ)·scale·η_t`, one column per
/// (asset, γ) pair in asset-major order; `steps + 1` rows.
pub fn ema_style_signals(steps: usize, n_assets: usize, gammas: &[f64], scale: f64, seed: u64) -> DMatrix<f64> {
    let k = gammas.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DMatrix::zeros(steps + 1, n_assets * k);
    let mut e = vec![0.0; n_assets * k];
    for t in 0..=steps {
        for i in 0..n_assets {
            for (j, g) in gammas.iter().enumerate() {
                let c = i * k + j;
                let eta: f64 = StandardNormal.sample(&mut rng);
                e[c] = g * e[c] + (1.0 - g) * scale * eta;
                z[(t, c)] = 1.0 + e[c];
            }
        }
    }
    z
}

pub fn block_mask(n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n * k, |i, j| if j / k == i { 1.0 } else { 0.0 })
}

pub const DAILY: f64 = 1.0 / 252.0;

/// Five-asset generator with `κΔt ∈ [0.8, 1.2]`, weights summing to one and
/// residual volatility near 1%.
pub fn gmr_truth(n: usize) -> GmrParams {
    let kappa = DVector::from_fn(n, |i, _| (0.8 + 0.1 * i as f64) / DAILY);
    let w = DMatrix::from_fn(n, 2 * n, |i, j| {
        if j / 2 != i {
            0.0
        } else if j % 2 == 0 {
            0.5 + 0.05 * i as f64
        } else {
            0.5 - 0.05 * i as f64
        }
    });
    let sigma2 = DVector::from_fn(n, |i, _| (0.008 + 0.001 * i as f64).powi(2));
    GmrParams::new(kappa, w, sigma2, DAILY).unwrap()
}

/// One asset, two signals, with impact, risk aversion and costs switched on.
pub fn irl_market() -> ModelParams {
    let mut p = ModelParams::new(1, 2).with_scalar_costs(0.01, 0.01, 0.001, 0.001, 0.001);
    p.mu = DVector::from_vec(vec![0.05]);
    p.lambda = 0.5;
    p.w = DMatrix::from_row_slice(1, 2, &[0.02, 0.01]);
    p.sigma_r = DMatrix::from_element(1, 1, 1e-4);
    p.sigma_z = DMatrix::identity(2, 2) * 0.01;
    p.phi = DVector::from_vec(vec![0.1, 0.04]);
    p.gamma_disc = 0.9;
    p
}

pub fn irl_prior(n_y: usize) -> GaussianPolicy {
    GaussianPolicy::from_scalars(0.0, 0.0, 0.0, 0.01, 2, n_y).unwrap()
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Expected one-step reward for a single asset, written out from the model.
pub fn reward_1d(p: &ModelParams, y: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let (x, z) = (y[0], y[1]);
    let (up, um) = (a[0], a[1]);
    let u = up - um;
    let s = x + u;
    let rbar = p.r_f + p.w[(0, 0)] * z - p.mu[0] * u;
    (rbar - p.r_f) * s - p.lambda * p.sigma_r[(0, 0)] * s * s - p.upsilon[(0, 0)] * x * z
        - x * (p.gamma_plus[(0, 0)] * up + p.gamma_minus[(0, 0)] * um)
        - p.nu_plus[0] * up
        - p.nu_minus[0] * um
}

pub fn image_1d(p: &ModelParams, y: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
    let u = a[0] - a[1];
    let x1 = (1.0 + p.r_f + p.w[(0, 0)] * y[1] - p.mu[0] * u) * (y[0] + u);
    dvector![x1, (1.0 - p.phi[0]) * y[1]]
}

/// Mean map `m(y, a) = f(ȳ, ā) + J_y δy + J_a δa` with central-difference Jacobians.
pub struct MeanMap {
    base: DVector<f64>,
    jy: DMatrix<f64>,
    ja: DMatrix<f64>,
    y_bar: DVector<f64>,
    a_bar: DVector<f64>,
}

impl MeanMap {
    pub fn new(p: &ModelParams, y_bar: &DVector<f64>, a_bar: &DVector<f64>) -> Self {
        let h = 1e-5;
        let mut jy = DMatrix::zeros(2, 2);
        let mut ja = DMatrix::zeros(2, 2);
        for k in 0..2 {
            let mut e = DVector::zeros(2);
            e[k] = h;
            jy.set_column(k, &((image_1d(p, &(y_bar + &e), a_bar) - image_1d(p, &(y_bar - &e), a_bar)) / (2.0 * h)));
            ja.set_column(k, &((image_1d(p, y_bar, &(a_bar + &e)) - image_1d(p, y_bar, &(a_bar - &e))) / (2.0 * h)));
        }
        MeanMap {
            base: image_1d(p, y_bar, a_bar),
            jy,
            ja,
            y_bar: y_bar.clone(),
            a_bar: a_bar.clone(),
        }
    }

    pub fn eval(&self, y: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.jy * (y - &self.y_bar) + &self.ja * (a - &self.a_bar)
    }
}
