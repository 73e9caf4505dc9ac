//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::{c, Real};

/// `(m + mᵀ)/2`.
pub fn sym<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * c::<T>(0.5)
}

/// Cholesky factor or a typed failure.
pub fn chol<T: Real>(m: &DMatrix<T>, context: &'static str) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { context })
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inv<T: Real>(m: &DMatrix<T>, context: &'static str) -> Result<DMatrix<T>> {
    Ok(chol(m, context)?.inverse())
}

/// `log|m|` of a symmetric positive definite matrix.
pub fn spd_logdet<T: Real>(m: &DMatrix<T>, context: &'static str) -> Result<T> {
    let ch = chol(m, context)?;
    Ok(chol_logdet(&ch))
}

pub fn chol_logdet<T: Real>(ch: &Cholesky<T, Dyn>) -> T {
    ch.l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, d| acc + d.ln())
        * c::<T>(2.0)
}

/// `[I, -I]`, the n×2n map from `a = [u⁺; u⁻]` to `u`.
pub fn l_split<T: Real>(n: usize) -> DMatrix<T> {
    let mut l = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        l[(i, i)] = T::one();
        l[(i, n + i)] = -T::one();
    }
    l
}

/// `[I, 0]`, the n×n_y selector of `x` in `y = [x; z]`.
pub fn p_select<T: Real>(n: usize, n_y: usize) -> DMatrix<T> {
    let mut p = DMatrix::zeros(n, n_y);
    for i in 0..n {
        p[(i, i)] = T::one();
    }
    p
}

pub fn vcat<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// `[[a, b], [c, d]]`.
pub fn block2<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    c_: &DMatrix<T>,
    d: &DMatrix<T>,
) -> DMatrix<T> {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    assert_eq!(b.shape(), (r1, c2));
    assert_eq!(c_.shape(), (r2, c1));
    let mut m = DMatrix::zeros(r1 + r2, c1 + c2);
    m.view_mut((0, 0), (r1, c1)).copy_from(a);
    m.view_mut((0, c1), (r1, c2)).copy_from(b);
    m.view_mut((r1, 0), (r2, c1)).copy_from(c_);
    m.view_mut((r1, c1), (r2, c2)).copy_from(d);
    m
}

pub fn trace<T: Real>(m: &DMatrix<T>) -> T {
    m.diagonal().iter().fold(T::zero(), |a, b| a + *b)
}

/// `Tr[a b]` without forming the product.
pub fn trace_prod<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let mut s = T::zero();
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

pub fn quad_form<T: Real>(x: &DVector<T>, m: &DMatrix<T>, y: &DVector<T>) -> T {
    (x.transpose() * m * y)[(0, 0)]
}

pub fn diag_m<T: Real>(v: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_diagonal(v)
}

/// `(1/2β)·log|I − 2βS|` for a square `S`, finite at `β = 0`.
///
/// Uses the trace series `−Σ_k (2β)^{k−1} Tr[S^k]/k` while `‖2βS‖` is small and a
/// determinant otherwise. `S` must make `I − 2βS` have positive determinant.
pub fn half_log_det_ratio<T: Real>(beta: T, s: &DMatrix<T>) -> Result<T> {
    let two_b = beta * c::<T>(2.0);
    let norm = s.iter().fold(0.0f64, |a, x| a + x.re() * x.re()).sqrt() * two_b.re().abs();
    if norm < 0.05 {
        let mut total = T::zero();
        let mut pow = s.clone();
        let mut coef = T::one();
        for k in 1..=40 {
            let term = trace(&pow) * coef / c::<T>(k as f64);
            total -= term;
            if term.mag() < 1e-18 * (1.0 + total.mag()) && k > 2 {
                break;
            }
            pow = &pow * s;
            coef *= two_b;
        }
        Ok(total)
    } else {
        let n = s.nrows();
        let m = DMatrix::<T>::identity(n, n) - s * two_b;
        let det = m.clone().lu().determinant();
        if det.re() <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                context: "I - 2 beta Sigma_p G_aa",
            });
        }
        Ok(det.ln() / two_b)
    }
}

/// Lower-triangular matrix from its packed rows with log-diagonal, `L Lᵀ` returned.
pub fn cov_from_chol_params<T: Real>(n: usize, p: &[T]) -> DMatrix<T> {
    let l = chol_from_params(n, p);
    &l * l.transpose()
}

pub fn chol_from_params<T: Real>(n: usize, p: &[T]) -> DMatrix<T> {
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = if i == j { p[k].exp() } else { p[k] };
            k += 1;
        }
    }
    l
}

/// Inverse of [`chol_from_params`] for an SPD matrix.
pub fn chol_params(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    let l = chol(m, "covariance parametrization")?.l();
    let mut p = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            p.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    Ok(p)
}

pub fn is_finite_m(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_log_det_ratio_branches_agree() {
        let s = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.2]);
        for &b in &[0.0, 1e-6, 0.02, 0.08, 0.5] {
            let v = half_log_det_ratio(b, &s).unwrap();
            let exact = if b == 0.0 {
                -0.5
            } else {
                let m = DMatrix::identity(2, 2) - &s * (2.0 * b);
                m.determinant().ln() / (2.0 * b)
            };
            assert!((v - exact).abs() < 1e-9, "beta {b}: {v} vs {exact}");
        }
    }

    #[test]
    fn chol_params_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let p = chol_params(&m).unwrap();
        let back = cov_from_chol_params(3, &p);
        assert!((back - m).abs().max() < 1e-14);
    }
}
