use nalgebra::{DMatrix, DVector};

use super::{LinearizationPoint, LinearizedDynamics};
use crate::error::{check_dim, Result};
use crate::linalg::{block2, l_split, vcat};
use crate::model_core::ModelParams;
use crate::scalar::Real;

/// Noiseless image of `(y, a)` under the exact transition.
pub fn noiseless_image<T: Real>(
    params: &ModelParams<T>,
    y: &DVector<T>,
    a: &DVector<T>,
) -> DVector<T> {
    let n = params.n_assets();
    let nz = params.n_signals();
    let x = y.rows(0, n);
    let z = y.rows(n, nz).into_owned();
    let u = l_split::<T>(n) * a;
    let gross = (&params.w * &z - params.mu.component_mul(&u)).add_scalar(T::one() + params.r_f);
    let x_next = gross.component_mul(&(x + &u));
    let z_next = params.phi.map(|p| T::one() - p).component_mul(&z);
    vcat(&x_next, &z_next)
}

/// First-order expansion of the transition around `point`.
pub fn linearize_dynamics<T: Real>(
    params: &ModelParams<T>,
    point: &LinearizationPoint<T>,
) -> Result<LinearizedDynamics<T>> {
    let n = params.n_assets();
    let nz = params.n_signals();
    check_dim("linearization y_bar", n + nz, point.y_bar.len())?;
    check_dim("linearization y_bar_next", n + nz, point.y_bar_next.len())?;
    check_dim("linearization a_bar", 2 * n, point.a_bar.len())?;
    let x_bar = point.y_bar.rows(0, n).into_owned();
    let z_bar = point.y_bar.rows(n, nz).into_owned();
    let xn_bar = point.y_bar_next.rows(0, n).into_owned();
    let zn_bar = point.y_bar_next.rows(n, nz).into_owned();
    let u_bar = point.u_bar();
    let s_bar = &x_bar + &u_bar;

    let gross = (&params.w * &z_bar - params.mu.component_mul(&u_bar)).add_scalar(T::one() + params.r_f);
    let omega_x = DMatrix::from_diagonal(&gross);
    let omega_u = &omega_x - DMatrix::from_diagonal(&s_bar.component_mul(&params.mu));
    let omega_z = DMatrix::from_diagonal(&s_bar) * &params.w;
    let omega_0 = gross.component_mul(&s_bar) - &xn_bar;

    let decay = DMatrix::from_diagonal(&params.phi.map(|p| T::one() - p));
    let psi_y = block2(&omega_x, &omega_z, &DMatrix::zeros(nz, n), &decay);
    let mut psi_a = DMatrix::zeros(n + nz, 2 * n);
    psi_a
        .view_mut((0, 0), (n, 2 * n))
        .copy_from(&(&omega_u * l_split::<T>(n)));
    let psi_0 = vcat(&omega_0, &(&decay * &z_bar - &zn_bar));
    let sigma_xx = params.sigma_r.component_mul(&(&s_bar * s_bar.transpose()));
    let sigma_y = block2(
        &sigma_xx,
        &DMatrix::zeros(n, nz),
        &DMatrix::zeros(nz, n),
        &params.sigma_z,
    );
    Ok(LinearizedDynamics {
        psi_0,
        psi_y,
        psi_a,
        sigma_y,
        omega_0,
        omega_x,
        omega_u,
        omega_z,
        s_bar,
        sigma_r: params.sigma_r.clone(),
        sigma_z: params.sigma_z.clone(),
    })
}
