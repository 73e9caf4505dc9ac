use marketirl::{GaussianPolicy, ModelParams};
use nalgebra::{DMatrix, DVector};

use crate::config::ModelConfig;
use crate::fail::CliError;

pub fn check_len(what: &str, want: usize, got: usize) -> Result<(), CliError> {
    if want == got {
        Ok(())
    } else {
        Err(CliError::config(format!("{what}: expected {want} entries, got {got}")))
    }
}

/// `N × (K·N)` loadings with asset `i`'s own signals in columns `i·K..i·K+K`.
pub fn block_loadings(rows: &[Vec<f64>], n: usize, k: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    check_len(what, n, rows.len())?;
    let mut w = DMatrix::zeros(n, n * k);
    for (i, r) in rows.iter().enumerate() {
        check_len(&format!("{what} row {i}"), k, r.len())?;
        for (j, v) in r.iter().enumerate() {
            w[(i, i * k + j)] = *v;
        }
    }
    Ok(w)
}

pub fn own_signal_mask(n: usize, k: usize) -> DMatrix<bool> {
    DMatrix::from_fn(n, n * k, |i, c| c / k == i)
}

pub fn market_params(m: &ModelConfig) -> Result<ModelParams, CliError> {
    let (n, k) = (m.n_assets, m.signals);
    if n == 0 || k == 0 {
        return Err(CliError::config("model.n_assets and model.signals must be positive"));
    }
    check_len("model.mu", n, m.mu.len())?;
    check_len("model.sigma_r", n, m.sigma_r.len())?;
    check_len("model.phi", k, m.phi.len())?;
    check_len("model.sigma_z", k, m.sigma_z.len())?;
    let mut p =
        ModelParams::new(n, k).with_scalar_costs(m.gamma_plus, m.gamma_minus, m.upsilon, m.nu_plus, m.nu_minus);
    p.r_f = m.r_f;
    p.w = block_loadings(&m.w, n, k, "model.w")?;
    p.mu = DVector::from_vec(m.mu.clone());
    p.sigma_r = DMatrix::from_diagonal(&DVector::from_vec(m.sigma_r.clone()));
    p = p.with_phi_per_kind(&m.phi);
    p.sigma_z = DMatrix::from_diagonal(&DVector::from_fn(n * k, |c, _| m.sigma_z[c % k]));
    p.lambda = m.lambda;
    p.gamma_disc = m.gamma_disc;
    p.beta = m.beta;
    p.validate()?;
    Ok(p)
}

pub fn prior(m: &ModelConfig, p: &ModelParams) -> Result<GaussianPolicy, CliError> {
    Ok(GaussianPolicy::from_scalars(
        m.prior_a0,
        m.prior_a1,
        m.prior_rho,
        m.prior_sigma,
        p.n_a(),
        p.n_y(),
    )?)
}

pub fn initial_state(m: &ModelConfig, p: &ModelParams) -> Result<DVector<f64>, CliError> {
    check_len("model.x0", p.n_assets(), m.x0.len())?;
    let mut y = DVector::zeros(p.n_y());
    y.rows_mut(0, p.n_assets()).copy_from_slice(&m.x0);
    Ok(y)
}

pub fn state_labels(p: &ModelParams) -> Vec<String> {
    (0..p.n_assets())
        .map(|i| format!("x{i}"))
        .chain((0..p.n_signals()).map(|j| format!("z{j}")))
        .collect()
}

pub fn action_labels(p: &ModelParams) -> Vec<String> {
    (0..p.n_assets())
        .map(|i| format!("u_plus{i}"))
        .chain((0..p.n_assets()).map(|i| format!("u_minus{i}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_builds() {
        let c = ModelConfig::default();
        let p = market_params(&c).unwrap();
        assert_eq!((p.n_assets(), p.n_signals()), (1, 2));
        assert_eq!(p.w[(0, 1)], 0.01);
        assert_eq!(initial_state(&c, &p).unwrap().len(), 3);
    }

    #[test]
    fn block_layout() {
        let w = block_loadings(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2, 2, "w").unwrap();
        assert_eq!(w, DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0]));
        let m = own_signal_mask(2, 2);
        assert!(m[(1, 2)] && !m[(0, 2)]);
        assert!(block_loadings(&[vec![1.0]], 2, 2, "w").is_err());
    }

    #[test]
    fn length_mismatch_is_config_error() {
        let mut c = ModelConfig::default();
        c.mu = vec![0.1, 0.2];
        assert_eq!(market_params(&c).unwrap_err().code, crate::fail::CONFIG);
    }
}
