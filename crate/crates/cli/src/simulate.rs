use marketirl::entropy_rl::{stationary_solve, StationaryOptions};
use marketirl::gmr::{normal_draws, simulate_gmr, simulate_lognormal_with_noise};
use marketirl::irl_engine::{simulate_market, SyntheticConfig};
use marketirl::signals_data::simulate_ou_signals;
use marketirl::{GmrParams, LinearizationPoint};
use nalgebra::{DMatrix, DVector};

use crate::config::{RunConfig, SimulateConfig};
use crate::fail::CliError;
use crate::io::{business_days, csv_text, parse_date, write_rows, RunDir};
use crate::model::{action_labels, block_loadings, check_len, initial_state, market_params, prior, state_labels};

/// Signals use their own stream so the return noise matches `normal_draws(seed)`.
pub fn signal_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

pub fn run(cfg: &RunConfig, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let s = &cfg.simulate;
    match s.model.as_str() {
        "gmr" | "lognormal" => gmr_like(s, cfg.seed, out),
        "market" => market(cfg, out),
        other => Err(CliError::config(format!("simulate.model must be gmr, lognormal or market, got {other:?}"))),
    }
}

fn gmr_like(s: &SimulateConfig, seed: u64, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let n = s.tickers.len();
    let k = s.signal_phi.len();
    if n == 0 || k == 0 {
        return Err(CliError::config("simulate needs at least one ticker and one signal kind"));
    }
    check_len("simulate.kappa", n, s.kappa.len())?;
    check_len("simulate.phi", n, s.phi.len())?;
    check_len("simulate.sigma2", n, s.sigma2.len())?;
    check_len("simulate.x0", n, s.x0.len())?;
    check_len("simulate.signal_var", k, s.signal_var.len())?;
    let w = block_loadings(&s.w, n, k, "simulate.w")?;
    let start = parse_date(&s.start_date)?;

    let phi_z = DVector::from_fn(n * k, |c, _| s.signal_phi[c % k]);
    let sigma_z = DMatrix::from_diagonal(&DVector::from_fn(n * k, |c, _| s.signal_var[c % k]));
    let z = simulate_ou_signals(&phi_z, &sigma_z, &DVector::zeros(n * k), s.steps, signal_seed(seed))?.values;
    let x0 = DVector::from_vec(s.x0.clone());

    let (x, nonpositive) = if s.model == "lognormal" {
        let eps = normal_draws(n, s.steps, seed);
        let sigma2 = DVector::from_vec(s.sigma2.clone());
        let x = simulate_lognormal_with_noise(&w, &sigma2, s.r_f, &x0, &z, &eps)?;
        let bad = x.iter().any(|v| *v <= 0.0);
        (x, bad)
    } else {
        let params = GmrParams {
            kappa: DVector::from_vec(s.kappa.clone()),
            w,
            sigma2: DVector::from_vec(s.sigma2.clone()),
            phi: DVector::from_vec(s.phi.clone()),
            r_f: s.r_f,
            dt: s.dt,
        };
        params.validate()?;
        let path = simulate_gmr(&params, &x0, &z, seed, s.steps)?;
        (path.x, path.nonpositive)
    };

    let dates = business_days(start, s.steps);
    let caps = csv_text(
        &["date", "ticker", "cap"],
        (1..=s.steps).flat_map(|t| {
            let d = dates[t - 1].to_string();
            let x = &x;
            s.tickers
                .iter()
                .enumerate()
                .map(move |(i, tk)| vec![d.clone(), tk.clone(), x[(t, i)].to_string()])
        }),
    );
    out.write("caps.csv", caps)?;
    let sig = csv_text(
        &["date", "ticker", "signal", "value"],
        (1..=s.steps).flat_map(|t| {
            let d = dates[t - 1].to_string();
            let z = &z;
            s.tickers.iter().enumerate().flat_map(move |(i, tk)| {
                let d = d.clone();
                (0..k).map(move |j| vec![d.clone(), tk.clone(), j.to_string(), z[(t, i * k + j)].to_string()])
            })
        }),
    );
    out.write("signals.csv", sig)?;

    let mut diag = vec![
        format!("model {}", s.model),
        format!("steps {}", s.steps),
        format!("nonpositive {}", u8::from(nonpositive)),
    ];
    if s.steps > 0 {
        for (i, tk) in s.tickers.iter().enumerate() {
            let col = x.column(i).rows(1, s.steps).into_owned();
            diag.push(format!("{tk} mean {} min {} max {}", col.mean(), col.min(), col.max()));
        }
    }
    out.write("diagnostics.txt", diag.join("\n") + "\n")?;
    if nonpositive {
        return Err(CliError::numeric("simulated cap reached a non-positive value"));
    }
    Ok(diag)
}

fn market(cfg: &RunConfig, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let s = &cfg.simulate;
    let p = market_params(&cfg.model)?;
    let pr = prior(&cfg.model, &p)?;
    let y0 = initial_state(&cfg.model, &p)?;
    let point = LinearizationPoint::forward(&p, &pr, &y0);
    let sol = stationary_solve(&p, &pr, p.beta, &point, &StationaryOptions::default())?;
    let (states, actions) = simulate_market(
        &p,
        &sol.policy,
        &SyntheticConfig {
            steps: s.steps,
            seed: cfg.seed,
            y0,
        },
    )?;
    let states = if s.steps == 0 { Vec::new() } else { states };
    out.write("states.csv", write_rows(&state_labels(&p), &states))?;
    out.write("actions.csv", write_rows(&action_labels(&p), &actions))?;
    let pol = &sol.policy;
    let text = format!(
        "a0 {}\na1 {}\nsigma_p {}\nstationary_iterations {}\nstationary_residual {:e}\n",
        fmt_vec(pol.a0.iter()),
        fmt_vec(pol.a1.iter()),
        fmt_vec(pol.sigma_p.iter()),
        sol.iterations,
        sol.residual
    );
    out.write("policy.txt", &text)?;
    let diag = vec![format!("model market"), format!("steps {}", s.steps)];
    out.write("diagnostics.txt", diag.join("\n") + "\n")?;
    Ok(diag)
}

/// Space-separated, column-major for matrices.
pub fn fmt_vec<'a>(v: impl Iterator<Item = &'a f64>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}
