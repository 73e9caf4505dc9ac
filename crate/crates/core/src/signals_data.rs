//! Market-cap panel ingestion and predictor construction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::chol;

/// Dense panel of rescaled market caps, dates × tickers.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPanel {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// Caps divided by `rescale_factor`.
    pub caps: DMatrix<f64>,
    /// Average over dates of the total market cap, in source units.
    pub rescale_factor: f64,
}

impl MarketPanel {
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    /// Column of one ticker.
    pub fn series(&self, j: usize) -> Vec<f64> {
        self.caps.column(j).iter().copied().collect()
    }

    /// Calendar-year windows as `(year, start, end)` with `end` exclusive.
    pub fn year_windows(&self) -> Vec<(i32, usize, usize)> {
        let mut out: Vec<(i32, usize, usize)> = Vec::new();
        for (i, d) in self.dates.iter().enumerate() {
            match out.last_mut() {
                Some(w) if w.0 == d.year() => w.2 = i + 1,
                _ => out.push((d.year(), i, i + 1)),
            }
        }
        out
    }
}

/// Parse `date,ticker,cap` rows into a dense rescaled panel.
pub fn load_market_caps<R: Read>(source: R) -> Result<MarketPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let want = ["date", "ticker", "cap"];
    if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| !h.eq_ignore_ascii_case(w)) {
        return Err(Error::Data(format!(
            "expected header date,ticker,cap, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    let mut tickers = BTreeSet::new();
    let mut dates = BTreeSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let row = line + 2;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("row {row}: bad date {:?}: {e}", &rec[0])))?;
        let ticker = rec[1].to_string();
        let cap: f64 = rec[2]
            .parse()
            .map_err(|e| Error::Data(format!("row {row}: bad cap {:?}: {e}", &rec[2])))?;
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::Data(format!("row {row}: non-positive cap {cap} for {ticker} on {date}")));
        }
        if cells.insert((date, ticker.clone()), cap).is_some() {
            return Err(Error::Data(format!("duplicate entry for ({date}, {ticker})")));
        }
        tickers.insert(ticker);
        dates.insert(date);
    }
    if cells.is_empty() {
        return Err(Error::Data("empty market-cap file".into()));
    }
    let tickers: Vec<String> = tickers.into_iter().collect();
    let dates: Vec<NaiveDate> = dates.into_iter().collect();
    let mut caps = DMatrix::zeros(dates.len(), tickers.len());
    for (i, d) in dates.iter().enumerate() {
        for (j, t) in tickers.iter().enumerate() {
            caps[(i, j)] = *cells
                .get(&(*d, t.clone()))
                .ok_or_else(|| Error::Data(format!("missing cap for ({d}, {t})")))?;
        }
    }
    let total: f64 = caps.row_iter().map(|r| r.sum()).sum();
    let rescale_factor = total / dates.len() as f64;
    caps /= rescale_factor;
    Ok(MarketPanel {
        tickers,
        dates,
        caps,
        rescale_factor,
    })
}

pub fn load_market_caps_file(path: impl AsRef<Path>) -> Result<MarketPanel> {
    let p = path.as_ref();
    let f = std::fs::File::open(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    load_market_caps(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalKind {
    Ema { gamma: f64 },
    Oracle,
    Noise { seed: u64 },
    Ou,
    Raw,
}

/// How a signal was built, kept for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub demeaned: bool,
}

/// One signal series with a usable prefix; entries past `usable` are not defined.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub values: Vec<f64>,
    pub usable: usize,
    pub spec: SignalSpec,
}

impl SignalSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        if t < self.usable {
            Ok(self.values[t])
        } else {
            Err(Error::Range {
                what: "signal",
                index: t,
                len: self.usable,
            })
        }
    }

    pub fn usable_values(&self) -> &[f64] {
        &self.values[..self.usable]
    }
}

fn demean_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

/// `e_t = γ e_{t−1} + (1−γ) x_t` with `e_0 = x_0`.
pub fn ema_signal(series: &[f64], gamma: f64, demean: bool) -> Result<SignalSeries> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("EMA gamma must be in [0,1), got {gamma}")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut e = 0.0;
    for (t, &x) in series.iter().enumerate() {
        e = if t == 0 { x } else { gamma * e + (1.0 - gamma) * x };
        out.push(e);
    }
    if demean {
        demean_in_place(&mut out);
    }
    Ok(SignalSeries {
        usable: out.len(),
        values: out,
        spec: SignalSpec {
            kind: SignalKind::Ema { gamma },
            demeaned: demean,
        },
    })
}

/// Demeaned realized next-step return `x_{t+1}/x_t − 1`. The final date has no
/// value and lies outside the usable range.
pub fn oracle_signal(series: &[f64]) -> Result<SignalSeries> {
    if series.len() < 2 {
        return Err(Error::Data("oracle signal needs at least 2 observations".into()));
    }
    let mut r: Vec<f64> = series.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    demean_in_place(&mut r);
    let usable = r.len();
    r.push(f64::NAN);
    Ok(SignalSeries {
        values: r,
        usable,
        spec: SignalSpec {
            kind: SignalKind::Oracle,
            demeaned: true,
        },
    })
}

/// Demeaned i.i.d. standard normal draws.
pub fn noise_signal(length: usize, seed: u64) -> SignalSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..length).map(|_| StandardNormal.sample(&mut rng)).collect();
    demean_in_place(&mut v);
    SignalSeries {
        usable: v.len(),
        values: v,
        spec: SignalSpec {
            kind: SignalKind::Noise { seed },
            demeaned: true,
        },
    }
}

/// Predictors stacked per date, `(steps+1) × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPanel {
    pub values: DMatrix<f64>,
    pub specs: Vec<SignalSpec>,
}

/// `z' = (1 − φ)∘z + ε`, `ε ~ N(0, Σ_z)`; row 0 is `z0`.
pub fn simulate_ou_signals(
    phi: &DVector<f64>,
    sigma_z: &DMatrix<f64>,
    z0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<SignalPanel> {
    let m = z0.len();
    check_dim("OU phi", m, phi.len())?;
    check_dim("OU covariance", m, sigma_z.nrows())?;
    if phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("OU phi entries must be in [0,1]".into()));
    }
    let l = noise_factor(sigma_z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(steps + 1, m);
    out.row_mut(0).copy_from(&z0.transpose());
    let mut z = z0.clone();
    for t in 1..=steps {
        let e = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        z = z.component_mul(&phi.map(|p| 1.0 - p)) + &l * e;
        out.row_mut(t).copy_from(&z.transpose());
    }
    Ok(SignalPanel {
        values: out,
        specs: vec![
            SignalSpec {
                kind: SignalKind::Ou,
                demeaned: false,
            };
            m
        ],
    })
}

/// Lower factor of a PSD covariance; zero rows/columns are allowed.
pub(crate) fn noise_factor(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if s.iter().all(|x| *x == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Ok(ch) = chol(s, "noise covariance") {
        return Ok(ch.l());
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * eig.eigenvalues.amax()) {
        return Err(Error::InvalidParameter("noise covariance is not PSD".into()));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d))
}

/// Stacked predictors: `values` is `T × (K·N)` with asset `i` occupying columns
/// `i·K..i·K+K`, and `mask` is the `N × (K·N)` loading pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPredictors {
    pub values: DMatrix<f64>,
    pub mask: DMatrix<f64>,
    pub specs: Vec<SignalSpec>,
    /// Smallest usable length over all inputs.
    pub usable: usize,
}

/// Stack `per_asset[i][k]` into the `K·N` layout.
pub fn stack_predictors(per_asset: &[Vec<SignalSeries>]) -> Result<StackedPredictors> {
    let n = per_asset.len();
    if n == 0 {
        return Err(Error::Data("no assets to stack".into()));
    }
    let k = per_asset[0].len();
    if k == 0 {
        return Err(Error::Data("no signals for asset 0".into()));
    }
    let t = per_asset[0][0].len();
    for (i, sigs) in per_asset.iter().enumerate() {
        if sigs.len() != k {
            return Err(Error::Data(format!("asset {i} has {} signals, expected {k}", sigs.len())));
        }
        if let Some(s) = sigs.iter().find(|s| s.len() != t) {
            return Err(Error::Data(format!("asset {i} has a signal of length {}, expected {t}", s.len())));
        }
    }
    let mut values = DMatrix::zeros(t, k * n);
    let mut mask = DMatrix::zeros(n, k * n);
    let mut specs = Vec::with_capacity(k * n);
    let mut usable = t;
    for (i, sigs) in per_asset.iter().enumerate() {
        for (j, s) in sigs.iter().enumerate() {
            let col = i * k + j;
            mask[(i, col)] = 1.0;
            for r in 0..t {
                values[(r, col)] = s.values[r];
            }
            specs.push(s.spec.clone());
            usable = usable.min(s.usable);
        }
    }
    Ok(StackedPredictors {
        values,
        mask,
        specs,
        usable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_rescale() {
        let csv = "date,ticker,cap\n2020-01-01,A,1\n2020-01-01,B,2\n2020-01-02,A,2\n2020-01-02,B,4\n2020-01-03,A,4\n2020-01-03,B,5\n";
        let p = load_market_caps(csv.as_bytes()).unwrap();
        assert_eq!(p.caps.shape(), (3, 2));
        assert_eq!(p.rescale_factor, 6.0);
        assert_eq!(p.caps[(2, 1)], 5.0 / 6.0);
    }

    #[test]
    fn panel_gap_is_named() {
        let csv = "date,ticker,cap\n2020-01-01,A,1\n2020-01-01,B,2\n2020-01-02,A,2\n";
        let err = load_market_caps(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("2020-01-02") && err.contains('B'), "{err}");
    }

    #[test]
    fn panel_duplicate_rejected() {
        let csv = "date,ticker,cap\n2020-01-01,A,1\n2020-01-01,A,2\n";
        assert!(load_market_caps(csv.as_bytes()).is_err());
    }

    #[test]
    fn ema_trivia() {
        let s = ema_signal(&[3.0; 5], 0.9, true).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-15));
        let x = [1.0, 4.0, 2.0];
        let s = ema_signal(&x, 0.0, true).unwrap();
        assert!((s.values[0] + 4.0 / 3.0).abs() < 1e-15);
        assert!(ema_signal(&x, 1.0, false).is_err());
    }

    #[test]
    fn oracle_trivia() {
        let s = oracle_signal(&[1.0, 1.1, 1.21]).unwrap();
        assert_eq!(s.usable, 2);
        assert!(s.at(0).unwrap().abs() < 1e-15 && s.at(1).unwrap().abs() < 1e-15);
        assert!(matches!(s.at(2), Err(Error::Range { .. })));
        assert!(oracle_signal(&[1.0]).is_err());
    }

    #[test]
    fn stack_mask() {
        let mk = |v: f64| ema_signal(&[v, v], 0.5, false).unwrap();
        let st = stack_predictors(&[vec![mk(1.0), mk(2.0)], vec![mk(3.0), mk(4.0)]]).unwrap();
        assert_eq!(st.mask, DMatrix::from_row_slice(2, 4, &[1., 1., 0., 0., 0., 0., 1., 1.]));
        assert_eq!(st.values[(0, 3)], 4.0);
        assert!(stack_predictors(&[vec![mk(1.0)], vec![mk(1.0), mk(2.0)]]).is_err());
    }

    #[test]
    fn ou_trivia() {
        let z0 = DVector::from_vec(vec![1.0, -2.0]);
        let zero = DMatrix::zeros(2, 2);
        let p = simulate_ou_signals(&DVector::from_element(2, 1.0), &zero, &z0, 3, 1).unwrap();
        assert!(p.values.rows(1, 3).iter().all(|v| *v == 0.0));
        let p = simulate_ou_signals(&DVector::zeros(2), &zero, &z0, 3, 1).unwrap();
        assert_eq!(p.values.row(3), z0.transpose());
    }
}
