//! Fixtures shared by the benchmarks.

use marketirl::entropy_rl::{stationary_solve, GaussianPolicy, LinearizationPoint, StationaryOptions};
use marketirl::gmr::{simulate_gmr, theta_level, GmrParams, MarketPath};
use marketirl::irl_engine::{simulate_market, SyntheticConfig, TransitionBatch};
use marketirl::signals_data::ema_signal;
use marketirl::ModelParams;
use nalgebra::{DMatrix, DVector};

pub const DAILY: f64 = 1.0 / 252.0;

/// One asset, two signals, proportional costs.
pub fn market() -> ModelParams {
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

pub fn prior(n_y: usize) -> GaussianPolicy {
    GaussianPolicy::from_scalars(0.0, 0.0, 0.0, 0.01, 2, n_y).unwrap()
}

pub fn start_point(p: &ModelParams, prior: &GaussianPolicy) -> LinearizationPoint {
    LinearizationPoint::forward(p, prior, &DVector::from_vec(vec![1.0, 0.02, -0.01]))
}

/// Market path of `steps` transitions under the stationary policy.
pub fn market_batch(steps: usize, seed: u64) -> TransitionBatch {
    let p = market();
    let pr = prior(p.n_y());
    let pt = start_point(&p, &pr);
    let sol = stationary_solve(&p, &pr, p.beta, &pt, &StationaryOptions::default()).unwrap();
    let cfg = SyntheticConfig {
        steps,
        seed,
        y0: DVector::from_vec(vec![1.0, 0.02, -0.01]),
    };
    let (states, _) = simulate_market(&p, &sol.policy, &cfg).unwrap();
    TransitionBatch::from_path(&states, None)
}

pub fn own_mask(n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n * k, |i, j| if j / k == i { 1.0 } else { 0.0 })
}

/// `n` assets with EMA-style signals, simulated for `steps` days.
pub fn gmr_path(n: usize, steps: usize, seed: u64) -> (GmrParams, MarketPath) {
    let kappa = DVector::from_fn(n, |i, _| (0.8 + 0.1 * i as f64) / DAILY);
    let w = DMatrix::from_fn(n, 2 * n, |i, j| if j / 2 != i { 0.0 } else { 0.5 });
    let sigma2 = DVector::from_element(n, 1e-4);
    let p = GmrParams::new(kappa, w, sigma2, DAILY).unwrap();
    let mut z = DMatrix::zeros(steps + 1, 2 * n);
    for i in 0..n {
        let base: Vec<f64> = (0..=steps)
            .map(|t| 1.0 + 0.1 * ((t as f64 * 0.07 + i as f64 + seed as f64).sin()))
            .collect();
        for (j, g) in [0.9, 0.96].iter().enumerate() {
            let s = ema_signal(&base, *g, false).unwrap();
            for t in 0..=steps {
                z[(t, 2 * i + j)] = s.values[t];
            }
        }
    }
    let x0 = theta_level(&p, &z.row(0).transpose()).unwrap();
    let path = simulate_gmr(&p, &x0, &z, seed, steps).unwrap();
    (p, path)
}
