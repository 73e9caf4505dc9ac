//! Paths generated by an agent following a Gaussian policy in the
//! impact-bearing market, for recovery tests and demos.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::entropy_rl::GaussianPolicy;
use crate::error::{check_dim, Error, Result};
use crate::model_core::{excess_returns, step_signals, step_wealth, ModelParams};
use crate::signals_data::noise_factor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub steps: usize,
    pub seed: u64,
    pub y0: DVector<f64>,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// States `y_0..=y_T` and actions `a_0..a_{T−1}` with `a_t ~ policy(·|y_t)`.
pub fn simulate_market(
    params: &ModelParams,
    policy: &GaussianPolicy,
    cfg: &SyntheticConfig,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    params.validate()?;
    policy.validate()?;
    let n = params.n_assets();
    let nz = params.n_signals();
    check_dim("initial state", params.n_y(), cfg.y0.len())?;
    check_dim("policy action dimension", params.n_a(), policy.n_a())?;
    let l_pol = noise_factor(&policy.sigma_p)?;
    let l_r = noise_factor(&params.sigma_r)?;
    let l_z = noise_factor(&params.sigma_z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut actions = Vec::with_capacity(cfg.steps);
    let mut y = cfg.y0.clone();
    states.push(y.clone());
    for t in 0..cfg.steps {
        let a = policy.mean(&y) + &l_pol * draw(&mut rng, 2 * n);
        let x = y.rows(0, n).into_owned();
        let z = y.rows(n, nz).into_owned();
        let u = a.rows(0, n) - a.rows(n, n);
        if let Some(i) = (0..n).find(|&i| x[i] + u[i] <= 0.0) {
            return Err(Error::Data(format!(
                "simulated position x + u = {} <= 0 for asset {i} at step {t}",
                x[i] + u[i]
            )));
        }
        let eps = &l_r * draw(&mut rng, n);
        let eps_z = &l_z * draw(&mut rng, nz);
        let r = excess_returns(params, &z, &u, &eps)?.add_scalar(params.r_f);
        let x1 = step_wealth(&x, &u, &r)?;
        let z1 = step_signals(params, &z, &eps_z)?;
        y = DVector::from_iterator(n + nz, x1.iter().chain(z1.iter()).copied());
        actions.push(a);
        states.push(y.clone());
    }
    Ok((states, actions))
}
