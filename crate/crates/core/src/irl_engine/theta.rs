//! Unconstrained coordinates for the model parameters `θ` and the
//! recognition parameters `ω`, plus the gradient helper shared by both steps.

use nalgebra::{DMatrix, DVector};
use num_dual::Dual64;

use super::VariationalParams;
use crate::error::{Error, Result};
use crate::linalg::{chol_from_params, chol_params};
use crate::model_core::ModelParams;
use crate::scalar::{c, lift_m, Real};

/// Which parameter groups the M-step moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitMask {
    pub w: bool,
    pub mu: bool,
    pub lambda: bool,
    pub beta: bool,
    pub impact: bool,
    pub upsilon: bool,
    pub fees: bool,
    pub sigma_r: bool,
    pub phi: bool,
    pub sigma_z: bool,
}

impl FitMask {
    pub fn all() -> Self {
        FitMask {
            w: true,
            mu: true,
            lambda: true,
            beta: true,
            impact: true,
            upsilon: true,
            fees: true,
            sigma_r: true,
            phi: true,
            sigma_z: true,
        }
    }

    pub fn none() -> Self {
        FitMask {
            w: false,
            mu: false,
            lambda: false,
            beta: false,
            impact: false,
            upsilon: false,
            fees: false,
            sigma_r: false,
            phi: false,
            sigma_z: false,
        }
    }
}

impl Default for FitMask {
    fn default() -> Self {
        FitMask::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    W(usize, usize),
    LogMu(usize),
    LogLambda,
    SoftplusBeta,
    LogGammaPlus,
    LogGammaMinus,
    Upsilon,
    LogNuPlus,
    LogNuMinus,
    LogSigmaR(usize),
    LogitPhi(usize),
    LogSigmaZ(usize),
}

/// Map between `ModelParams` and a flat unconstrained vector.
///
/// Fees and impacts are scalar multiples of a fixed pattern, covariances keep
/// their base correlation and move their variances, `Φ` is logit-transformed
/// and `β` softplus-transformed.
#[derive(Debug, Clone)]
pub struct ThetaMap {
    base: ModelParams,
    upsilon_pattern: DMatrix<f64>,
    corr_r: DMatrix<f64>,
    corr_z: DMatrix<f64>,
    coords: Vec<Coord>,
}

fn correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt()
    })
}

fn scalar_identity(m: &DMatrix<f64>) -> Option<f64> {
    let v = m[(0, 0)];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let want = if i == j { v } else { 0.0 };
            if m[(i, j)] != want {
                return None;
            }
        }
    }
    Some(v)
}

fn constant(v: &DVector<f64>) -> Option<f64> {
    v.iter().all(|x| *x == v[0]).then(|| v[0])
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!(
            "{what} must be positive to be fitted on the log scale, got {v}"
        )))
    }
}

impl ThetaMap {
    /// `w_mask` marks the free entries of `W`; `None` frees the entries that
    /// are nonzero in `base`.
    pub fn new(base: &ModelParams, w_mask: Option<&DMatrix<bool>>, fit: FitMask) -> Result<Self> {
        base.validate()?;
        let n = base.n_assets();
        let nz = base.n_signals();
        let mut coords = Vec::new();
        if fit.w {
            for j in 0..nz {
                for i in 0..n {
                    let free = match w_mask {
                        Some(m) => m[(i, j)],
                        None => base.w[(i, j)] != 0.0,
                    };
                    if free {
                        coords.push(Coord::W(i, j));
                    }
                }
            }
        }
        if fit.mu {
            for i in 0..n {
                positive(base.mu[i], "mu")?;
                coords.push(Coord::LogMu(i));
            }
        }
        if fit.lambda {
            positive(base.lambda, "lambda")?;
            coords.push(Coord::LogLambda);
        }
        if fit.beta {
            positive(base.beta, "beta")?;
            coords.push(Coord::SoftplusBeta);
        }
        if fit.impact {
            for (m, co, what) in [
                (&base.gamma_plus, Coord::LogGammaPlus, "Gamma+"),
                (&base.gamma_minus, Coord::LogGammaMinus, "Gamma-"),
            ] {
                let v = scalar_identity(m).ok_or_else(|| {
                    Error::InvalidParameter(format!("{what} must be a multiple of I to be fitted"))
                })?;
                positive(v, what)?;
                coords.push(co);
            }
        }
        let mut upsilon_pattern = DMatrix::zeros(n, nz);
        if fit.upsilon && nz > 0 {
            let scale = base.upsilon.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if scale > 0.0 {
                upsilon_pattern = &base.upsilon / scale;
            } else {
                upsilon_pattern.fill(1.0);
            }
            coords.push(Coord::Upsilon);
        }
        if fit.fees {
            for (v, co, what) in [
                (&base.nu_plus, Coord::LogNuPlus, "nu+"),
                (&base.nu_minus, Coord::LogNuMinus, "nu-"),
            ] {
                let s = constant(v).ok_or_else(|| {
                    Error::InvalidParameter(format!("{what} must be constant across assets to be fitted"))
                })?;
                positive(s, what)?;
                coords.push(co);
            }
        }
        if fit.sigma_r {
            coords.extend((0..n).map(Coord::LogSigmaR));
        }
        if fit.phi {
            for j in 0..nz {
                let p = base.phi[j];
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "phi[{j}] = {p} must lie in (0, 1) to be fitted"
                    )));
                }
                coords.push(Coord::LogitPhi(j));
            }
        }
        if fit.sigma_z {
            coords.extend((0..nz).map(Coord::LogSigmaZ));
        }
        Ok(ThetaMap {
            corr_r: correlation(&base.sigma_r),
            corr_z: if nz > 0 { correlation(&base.sigma_z) } else { DMatrix::zeros(0, 0) },
            upsilon_pattern,
            base: base.clone(),
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    /// Coordinate labels, in packing order.
    pub fn labels(&self) -> Vec<String> {
        self.coords
            .iter()
            .map(|co| match co {
                Coord::W(i, j) => format!("W[{i},{j}]"),
                Coord::LogMu(i) => format!("log mu[{i}]"),
                Coord::LogLambda => "log lambda".into(),
                Coord::SoftplusBeta => "softplus^-1 beta".into(),
                Coord::LogGammaPlus => "log Gamma+".into(),
                Coord::LogGammaMinus => "log Gamma-".into(),
                Coord::Upsilon => "Upsilon".into(),
                Coord::LogNuPlus => "log nu+".into(),
                Coord::LogNuMinus => "log nu-".into(),
                Coord::LogSigmaR(i) => format!("log Sigma_r[{i},{i}]"),
                Coord::LogitPhi(j) => format!("logit phi[{j}]"),
                Coord::LogSigmaZ(j) => format!("log Sigma_z[{j},{j}]"),
            })
            .collect()
    }

    pub fn pack(&self, p: &ModelParams) -> Vec<f64> {
        self.coords
            .iter()
            .map(|co| match *co {
                Coord::W(i, j) => p.w[(i, j)],
                Coord::LogMu(i) => p.mu[i].ln(),
                Coord::LogLambda => p.lambda.ln(),
                Coord::SoftplusBeta => p.beta.exp_m1().ln(),
                Coord::LogGammaPlus => p.gamma_plus[(0, 0)].ln(),
                Coord::LogGammaMinus => p.gamma_minus[(0, 0)].ln(),
                Coord::Upsilon => {
                    let k = self
                        .upsilon_pattern
                        .iter()
                        .position(|v| *v != 0.0)
                        .unwrap_or(0);
                    p.upsilon.as_slice()[k] / self.upsilon_pattern.as_slice()[k]
                }
                Coord::LogNuPlus => p.nu_plus[0].ln(),
                Coord::LogNuMinus => p.nu_minus[0].ln(),
                Coord::LogSigmaR(i) => p.sigma_r[(i, i)].ln(),
                Coord::LogitPhi(j) => (p.phi[j] / (1.0 - p.phi[j])).ln(),
                Coord::LogSigmaZ(j) => p.sigma_z[(j, j)].ln(),
            })
            .collect()
    }

    pub fn unpack<T: Real>(&self, theta: &[T]) -> ModelParams<T> {
        let mut p = self.base.lift::<T>();
        let n = p.n_assets();
        let nz = p.n_signals();
        let mut var_r: Option<Vec<T>> = None;
        let mut var_z: Option<Vec<T>> = None;
        for (co, &v) in self.coords.iter().zip(theta) {
            match *co {
                Coord::W(i, j) => p.w[(i, j)] = v,
                Coord::LogMu(i) => p.mu[i] = v.exp(),
                Coord::LogLambda => p.lambda = v.exp(),
                Coord::SoftplusBeta => p.beta = (T::one() + v.exp()).ln(),
                Coord::LogGammaPlus => p.gamma_plus = DMatrix::identity(n, n) * v.exp(),
                Coord::LogGammaMinus => p.gamma_minus = DMatrix::identity(n, n) * v.exp(),
                Coord::Upsilon => p.upsilon = lift_m::<T>(&self.upsilon_pattern) * v,
                Coord::LogNuPlus => p.nu_plus = DVector::from_element(n, v.exp()),
                Coord::LogNuMinus => p.nu_minus = DVector::from_element(n, v.exp()),
                Coord::LogSigmaR(i) => {
                    var_r.get_or_insert_with(|| (0..n).map(|k| p.sigma_r[(k, k)]).collect())[i] = v.exp()
                }
                Coord::LogitPhi(j) => p.phi[j] = T::one() / (T::one() + (-v).exp()),
                Coord::LogSigmaZ(j) => {
                    var_z.get_or_insert_with(|| (0..nz).map(|k| p.sigma_z[(k, k)]).collect())[j] = v.exp()
                }
            }
        }
        if let Some(d) = var_r {
            p.sigma_r = DMatrix::from_fn(n, n, |i, j| c::<T>(self.corr_r[(i, j)]) * (d[i] * d[j]).sqrt());
        }
        if let Some(d) = var_z {
            p.sigma_z = DMatrix::from_fn(nz, nz, |i, j| c::<T>(self.corr_z[(i, j)]) * (d[i] * d[j]).sqrt());
        }
        p
    }
}

/// Flat layout of `ω`: the action block `(μ_a, Λ_a, chol Σ_a)` first, then the
/// two encoders. `Σ_δ` is not a coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OmegaLayout {
    pub n_a: usize,
    pub n_y: usize,
}

impl OmegaLayout {
    fn tri(n: usize) -> usize {
        n * (n + 1) / 2
    }

    /// Length of the action block.
    pub fn action_len(&self) -> usize {
        self.n_a + self.n_a * self.n_y + Self::tri(self.n_a)
    }

    pub fn len(&self) -> usize {
        let ny = self.n_y;
        self.action_len() + 2 * ny + 3 * ny * ny + 2 * Self::tri(ny)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, o: &VariationalParams) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(o.mu_a.iter());
        v.extend(o.lambda_a.iter());
        v.extend(chol_params(&o.sigma_a)?);
        v.extend(o.mu_phi.iter());
        v.extend(o.lambda_phi.iter());
        v.extend(chol_params(&o.sigma_phi)?);
        v.extend(o.mu_varphi.iter());
        v.extend(o.lambda_varphi_1.iter());
        v.extend(o.lambda_varphi_2.iter());
        v.extend(chol_params(&o.sigma_varphi)?);
        Ok(v)
    }

    pub fn unpack<T: Real>(&self, v: &[T], sigma_delta: &DMatrix<f64>) -> VariationalParams<T> {
        let (na, ny) = (self.n_a, self.n_y);
        let mut k = 0;
        let mut take = |len: usize| {
            let s = &v[k..k + len];
            k += len;
            s
        };
        let vec = |s: &[T]| DVector::from_column_slice(s);
        let mat = |r: usize, cc: usize, s: &[T]| DMatrix::from_column_slice(r, cc, s);
        let cov = |n: usize, s: &[T]| {
            let l = chol_from_params(n, s);
            &l * l.transpose()
        };
        let mu_a = vec(take(na));
        let lambda_a = mat(na, ny, take(na * ny));
        let sigma_a = cov(na, take(Self::tri(na)));
        let mu_phi = vec(take(ny));
        let lambda_phi = mat(ny, ny, take(ny * ny));
        let sigma_phi = cov(ny, take(Self::tri(ny)));
        let mu_varphi = vec(take(ny));
        let lambda_varphi_1 = mat(ny, ny, take(ny * ny));
        let lambda_varphi_2 = mat(ny, ny, take(ny * ny));
        let sigma_varphi = cov(ny, take(Self::tri(ny)));
        VariationalParams {
            mu_a,
            lambda_a,
            sigma_a,
            mu_phi,
            lambda_phi,
            sigma_phi,
            mu_varphi,
            lambda_varphi_1,
            lambda_varphi_2,
            sigma_varphi,
            sigma_delta: lift_m(sigma_delta),
        }
    }
}

/// How gradients of the free energy are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Central differences with step `1e-6·(1+|x|)`.
    #[default]
    FiniteDiff,
    /// Forward-mode dual numbers, one pass per coordinate.
    Dual,
}

impl std::str::FromStr for GradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" | "finite-diff" => Ok(GradMode::FiniteDiff),
            "dual" | "analytic" => Ok(GradMode::Dual),
            _ => Err(Error::InvalidParameter(format!("unknown gradient mode '{s}'"))),
        }
    }
}

/// Gradient of a scalar function over the coordinates `active` of `x`.
/// Coordinates outside `active` get a zero entry.
pub fn gradient<F, D>(
    mode: GradMode,
    x: &[f64],
    active: std::ops::Range<usize>,
    f: F,
    f_dual: D,
) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
    D: Fn(&[Dual64]) -> Result<Dual64>,
{
    let mut g = DVector::zeros(x.len());
    match mode {
        GradMode::FiniteDiff => {
            let mut xp = x.to_vec();
            for i in active {
                let h = 1e-6 * (1.0 + x[i].abs());
                xp[i] = x[i] + h;
                let up = f(&xp)?;
                xp[i] = x[i] - h;
                let dn = f(&xp)?;
                xp[i] = x[i];
                g[i] = (up - dn) / (2.0 * h);
            }
        }
        GradMode::Dual => {
            let mut xd: Vec<Dual64> = x.iter().map(|v| Dual64::from(*v)).collect();
            for i in active {
                xd[i] = Dual64::new(x[i], 1.0);
                g[i] = f_dual(&xd)?.eps;
                xd[i] = Dual64::from(x[i]);
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelParams {
        let mut p = ModelParams::new(2, 1).with_scalar_costs(0.01, 0.02, 0.003, 0.001, 0.002);
        p.mu = DVector::from_vec(vec![0.1, 0.2]);
        p.lambda = 0.5;
        p.w = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.4]);
        p.sigma_r = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        p
    }

    #[test]
    fn theta_round_trip() {
        let b = base();
        let m = ThetaMap::new(&b, None, FitMask::all()).unwrap();
        assert_eq!(m.labels().iter().filter(|l| l.starts_with("W")).count(), 2);
        let th = m.pack(&b);
        let back = m.unpack::<f64>(&th);
        for (a, e) in [(&back.sigma_r, &b.sigma_r), (&back.upsilon, &b.upsilon), (&back.w, &b.w)] {
            assert!((a - e).abs().max() < 1e-15);
        }
        assert!((back.beta - b.beta).abs() < 1e-14);
        assert!((&back.phi - &b.phi).abs().max() < 1e-15);
    }

    #[test]
    fn log_coordinate_needs_positive_base() {
        let mut b = base();
        b.lambda = 0.0;
        assert!(ThetaMap::new(&b, None, FitMask::all()).is_err());
        let mut fit = FitMask::all();
        fit.lambda = false;
        assert!(ThetaMap::new(&b, None, fit).is_ok());
    }

    #[test]
    fn omega_round_trip() {
        let prior = crate::entropy_rl::GaussianPolicy {
            a0: DVector::from_vec(vec![0.1, 0.2]),
            a1: DMatrix::from_element(2, 3, 0.05),
            sigma_p: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        };
        let o = VariationalParams::init(&prior, 3, 0.3, 0.01);
        let lay = OmegaLayout { n_a: 2, n_y: 3 };
        let v = lay.pack(&o).unwrap();
        assert_eq!(v.len(), lay.len());
        let back = lay.unpack::<f64>(&v, &o.sigma_delta);
        assert!((&back.sigma_a - &o.sigma_a).abs().max() < 1e-14);
        assert_eq!(back.lambda_varphi_1, o.lambda_varphi_1);
    }

    #[test]
    fn fd_and_dual_agree_on_a_polynomial() {
        use nalgebra::ComplexField;
        let f = |x: &[f64]| Ok(x[0] * x[0] * x[1] + x[1].exp());
        let fd = |x: &[Dual64]| Ok(x[0] * x[0] * x[1] + x[1].exp());
        let x = [1.5, -0.3];
        let a = gradient(GradMode::FiniteDiff, &x, 0..2, f, fd).unwrap();
        let b = gradient(GradMode::Dual, &x, 0..2, f, fd).unwrap();
        assert!((a - b).abs().max() < 1e-8);
    }
}
