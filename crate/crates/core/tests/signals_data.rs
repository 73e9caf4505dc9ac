use marketirl::signals_data::{
    ema_signal, load_market_caps, load_market_caps_file, noise_signal, oracle_signal, simulate_ou_signals,
    stack_predictors, SignalKind,
};
use marketirl::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

fn panel_csv(tickers: &[&str], caps: &[Vec<f64>]) -> String {
    let mut s = String::from("date,ticker,cap\n");
    for (d, row) in caps.iter().enumerate() {
        for (t, c) in tickers.iter().zip(row) {
            s += &format!("2021-03-{:02},{t},{c}\n", d + 1);
        }
    }
    s
}

#[test]
fn load_small_panel() {
    let csv = panel_csv(&["AAA", "BBB"], &[vec![1.0, 2.0], vec![1.5, 2.5], vec![2.0, 1.0]]);
    let p = load_market_caps(csv.as_bytes()).unwrap();
    assert_eq!(p.n_dates(), 3);
    assert_eq!(p.n_tickers(), 2);
    assert_eq!(p.tickers, vec!["AAA", "BBB"]);
    assert!(p.dates.windows(2).all(|w| w[0] < w[1]));
    assert!((p.rescale_factor - 10.0 / 3.0).abs() < 1e-15);
    assert!((p.series(1)[1] - 2.5 * 0.3).abs() < 1e-15);
}

#[test]
fn rows_in_any_order_give_same_panel() {
    let a = "date,ticker,cap\n2021-01-04,X,3\n2021-01-04,Y,3\n2021-01-05,X,6\n2021-01-05,Y,6\n2021-01-06,X,9\n2021-01-06,Y,9\n";
    let b = "date,ticker,cap\n2021-01-06,Y,9\n2021-01-05,X,6\n2021-01-04,Y,3\n2021-01-06,X,9\n2021-01-04,X,3\n2021-01-05,Y,6\n";
    let pa = load_market_caps(a.as_bytes()).unwrap();
    let pb = load_market_caps(b.as_bytes()).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(pa.rescale_factor, 12.0);
}

#[test]
fn loading_file_twice_is_bit_identical() {
    let mut f = tempfile_path();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(1e9..1e11)).collect()).collect();
    f.1.write_all(panel_csv(&["A", "B", "C"], &rows).as_bytes()).unwrap();
    f.1.flush().unwrap();
    let a = load_market_caps_file(&f.0).unwrap();
    let b = load_market_caps_file(&f.0).unwrap();
    assert_eq!(a.caps.as_slice(), b.caps.as_slice());
    let _ = std::fs::remove_file(&f.0);
}

fn tempfile_path() -> (std::path::PathBuf, std::fs::File) {
    let p = std::env::temp_dir().join(format!("caps-{}-{:?}.csv", std::process::id(), std::thread::current().id()));
    let f = std::fs::File::create(&p).unwrap();
    (p, f)
}

#[test]
fn bad_inputs_rejected() {
    let cases = [
        ("date,ticker,cap\n2021-01-01,A,-1\n", "non-positive"),
        ("date,ticker,cap\n2021-01-01,A,0\n", "non-positive"),
        ("date,name,cap\n2021-01-01,A,1\n", "header"),
        ("date,ticker,cap\n01/02/2021,A,1\n", "bad date"),
        ("date,ticker,cap\n2021-01-01,A,abc\n", "bad cap"),
        ("date,ticker,cap\n", "empty"),
    ];
    for (csv, what) in cases {
        let e = load_market_caps(csv.as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
        assert!(e.to_string().contains(what), "{e}");
    }
    assert!(matches!(load_market_caps_file("/nonexistent/caps.csv"), Err(Error::Io(_))));
}

#[test]
fn year_windows_split_calendar_years() {
    let csv = "date,ticker,cap\n2010-12-30,A,1\n2010-12-31,A,1\n2011-01-03,A,1\n2011-06-01,A,1\n2012-01-02,A,1\n";
    let p = load_market_caps(csv.as_bytes()).unwrap();
    assert_eq!(p.year_windows(), vec![(2010, 0, 2), (2011, 2, 4), (2012, 4, 5)]);
}

#[test]
fn ema_matches_unrolled_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = 0.9f64;
    let s = ema_signal(&x, g, false).unwrap();
    for t in [0usize, 1, 2, 17, 150, 299] {
        // e_t = γ^t x_0 + Σ_{j=1..t} (1−γ) γ^{t−j} x_j
        let mut e = g.powi(t as i32) * x[0];
        for j in 1..=t {
            e += (1.0 - g) * g.powi((t - j) as i32) * x[j];
        }
        assert!((s.values[t] - e).abs() < 1e-12);
    }
    assert_eq!(s.spec.kind, SignalKind::Ema { gamma: 0.9 });
    let d = ema_signal(&x, g, true).unwrap();
    assert!(d.values.iter().sum::<f64>().abs() / 300.0 < 1e-10);
}

#[test]
fn ema_gamma_zero_is_demeaned_series() {
    let x = [2.0, 5.0, 3.0, 6.0];
    let s = ema_signal(&x, 0.0, true).unwrap();
    let m = 4.0;
    for t in 0..4 {
        assert!((s.values[t] - (x[t] - m)).abs() < 1e-15);
    }
    assert!(ema_signal(&x, -0.1, false).is_err());
}

#[test]
fn oracle_matches_longhand() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..2.0)).collect();
    let s = oracle_signal(&x).unwrap();
    let r: Vec<f64> = (0..49).map(|t| (x[t + 1] - x[t]) / x[t]).collect();
    let m = r.iter().sum::<f64>() / 49.0;
    for t in 0..49 {
        assert!((s.at(t).unwrap() - (r[t] - m)).abs() < 1e-14);
    }
    assert_eq!(s.usable_values().len(), 49);
    assert!(matches!(s.at(49), Err(Error::Range { index: 49, len: 49, .. })));
}

#[test]
fn oracle_alternating_moves() {
    let mut x = vec![1.0];
    for t in 0..10 {
        let last = *x.last().unwrap();
        x.push(if t % 2 == 0 { last * 1.1 } else { last * 0.9 });
    }
    let s = oracle_signal(&x).unwrap();
    for t in 0..10 {
        let want = if t % 2 == 0 { 0.1 } else { -0.1 };
        assert!((s.values[t] - want).abs() < 1e-14);
    }
}

#[test]
fn noise_signal_properties() {
    let a = noise_signal(1000, 5);
    assert_eq!(a, noise_signal(1000, 5));
    let b = noise_signal(1000, 6);
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((dot / (na * nb)).abs() < 0.1);
    assert!(a.values.iter().sum::<f64>().abs() / 1000.0 < 1e-10);
}

#[test]
fn ou_stationary_variance_and_determinism() {
    let phi = DVector::from_vec(vec![0.2, 0.05]);
    let sz = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
    let steps = 200_000;
    let p = simulate_ou_signals(&phi, &sz, &DVector::zeros(2), steps, 7).unwrap();
    assert_eq!(p.values, simulate_ou_signals(&phi, &sz, &DVector::zeros(2), steps, 7).unwrap().values);
    // stationary covariance solves S = A S A + Σ_z with A = diag(1 − φ)
    for i in 0..2 {
        let a = 1.0 - phi[i];
        let want = sz[(i, i)] / (1.0 - a * a);
        let col = p.values.column(i);
        let tail = col.rows(1000, steps - 999);
        let m = tail.mean();
        let var = tail.iter().map(|v| (v - m).powi(2)).sum::<f64>() / tail.len() as f64;
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }
    assert!(simulate_ou_signals(&DVector::from_element(2, 1.5), &sz, &DVector::zeros(2), 3, 1).is_err());
}

#[test]
fn stacking_single_asset_and_usable_range() {
    let x: Vec<f64> = (0..10).map(|t| 1.0 + 0.01 * t as f64).collect();
    let st = stack_predictors(&[vec![ema_signal(&x, 0.9, true).unwrap(), oracle_signal(&x).unwrap()]]).unwrap();
    assert_eq!(st.mask, DMatrix::from_element(1, 2, 1.0));
    assert_eq!(st.usable, 9);
    assert_eq!(st.specs.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_row_sums(n in 1usize..6, k in 1usize..5, len in 2usize..20) {
        let per: Vec<Vec<_>> = (0..n)
            .map(|i| (0..k).map(|j| noise_signal(len, (i * 10 + j) as u64)).collect())
            .collect();
        let st = stack_predictors(&per).unwrap();
        prop_assert_eq!(st.mask.shape(), (n, n * k));
        for i in 0..n {
            prop_assert_eq!(st.mask.row(i).sum(), k as f64);
            for c in 0..n * k {
                prop_assert_eq!(st.mask[(i, c)] != 0.0, c / k == i);
            }
        }
        prop_assert_eq!(st.values[(len - 1, n * k - 1)], per[n - 1][k - 1].values[len - 1]);
    }

    #[test]
    fn demeaned_signals_have_zero_mean(seed in 0u64..10_000, gamma in 0.0..0.99f64, len in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..2.0)).collect();
        let e = ema_signal(&x, gamma, true).unwrap();
        prop_assert!(e.values.iter().sum::<f64>().abs() / len as f64 <= 1e-10);
        let o = oracle_signal(&x).unwrap();
        prop_assert!(o.usable_values().iter().sum::<f64>().abs() / o.usable as f64 <= 1e-10);
    }
}
