use std::path::Path;

use marketirl::gmr::{calibrate, calibrate_joint, fitted_levels, CalibConfig, CalibInit, GmrFit};
use marketirl::signals_data::{
    ema_signal, load_market_caps_file, noise_signal, oracle_signal, stack_predictors, SignalKind, SignalSeries,
    SignalSpec,
};
use marketirl::{MarketPanel, MarketPath};
use nalgebra::{DMatrix, DVector};

use crate::config::{CalibrateConfig, RunConfig};
use crate::fail::CliError;
use crate::io::{csv_text, read_signal_file, RunDir};
use crate::plot::{level_plot, LevelSeries};

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Ema(f64),
    Oracle,
    Noise,
    File(usize),
}

fn parse_sources(entries: &[String], file_kinds: usize) -> Result<Vec<(String, Source)>, CliError> {
    let mut out = Vec::new();
    for e in entries {
        let bad = || CliError::config(format!("calibrate.signals entry {e:?}"));
        match e.split_once(':') {
            Some(("ema", g)) => out.push((e.clone(), Source::Ema(g.parse().map_err(|_| bad())?))),
            Some(("file", k)) => out.push((e.clone(), Source::File(k.parse().map_err(|_| bad())?))),
            None if e == "oracle" => out.push((e.clone(), Source::Oracle)),
            None if e == "noise" => out.push((e.clone(), Source::Noise)),
            None if e == "file" => out.extend((0..file_kinds).map(|k| (format!("file:{k}"), Source::File(k)))),
            _ => return Err(bad()),
        }
    }
    if out.is_empty() {
        return Err(CliError::config("calibrate.signals is empty"));
    }
    Ok(out)
}

fn demeaned(mut v: Vec<f64>, usable: usize) -> Vec<f64> {
    let m = v[..usable].iter().sum::<f64>() / usable.max(1) as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
    v
}

/// One window of calibration output.
struct WindowFit {
    label: String,
    start: usize,
    end: usize,
    fit: Option<GmrFit>,
    levels: Option<DMatrix<f64>>,
}

struct Inputs {
    panel: MarketPanel,
    sources: Vec<(String, Source)>,
    file: Vec<DMatrix<f64>>,
}

fn window_signals(c: &CalibrateConfig, inp: &Inputs, seed: u64, s: usize, e: usize) -> Result<Vec<Vec<SignalSeries>>, CliError> {
    let sample = match c.demean.as_str() {
        "window" => false,
        "sample" => true,
        other => return Err(CliError::config(format!("calibrate.demean must be window or sample, got {other:?}"))),
    };
    let len = e - s;
    let mut per_asset = Vec::with_capacity(inp.panel.n_tickers());
    for i in 0..inp.panel.n_tickers() {
        let full = inp.panel.series(i);
        let mut sigs = Vec::with_capacity(inp.sources.len());
        for (j, (_, src)) in inp.sources.iter().enumerate() {
            let series = match src {
                Source::Ema(g) => {
                    let mut v = ema_signal(&full, *g, sample)?.values[s..e].to_vec();
                    if !sample {
                        v = demeaned(v, len);
                    }
                    SignalSeries {
                        usable: len,
                        values: v,
                        spec: SignalSpec {
                            kind: SignalKind::Ema { gamma: *g },
                            demeaned: true,
                        },
                    }
                }
                Source::Oracle if sample => {
                    let o = oracle_signal(&full)?;
                    let usable = if e == full.len() { len - 1 } else { len };
                    SignalSeries {
                        values: o.values[s..e].to_vec(),
                        usable,
                        spec: o.spec,
                    }
                }
                Source::Oracle => oracle_signal(&full[s..e])?,
                Source::Noise => {
                    let k = (i * inp.sources.len() + j) as u64;
                    noise_signal(len, seed.wrapping_mul(1_000_003).wrapping_add(s as u64 * 7919 + k))
                }
                Source::File(k) => {
                    let m = &inp.file[i];
                    if *k >= m.ncols() {
                        return Err(CliError::config(format!("signal file has no column {k}")));
                    }
                    SignalSeries {
                        values: m.column(*k).rows(s, len).iter().copied().collect(),
                        usable: len,
                        spec: SignalSpec {
                            kind: SignalKind::Raw,
                            demeaned: false,
                        },
                    }
                }
            };
            sigs.push(series);
        }
        per_asset.push(sigs);
    }
    Ok(per_asset)
}

fn fit_window(c: &CalibrateConfig, inp: &Inputs, seed: u64, s: usize, e: usize) -> Result<(GmrFit, DMatrix<f64>), CliError> {
    let per_asset = window_signals(c, inp, seed, s, e)?;
    let st = stack_predictors(&per_asset)?;
    let n = inp.panel.n_tickers();
    let path = MarketPath {
        x: inp.panel.caps.rows(s, e - s).into_owned(),
        z: st.values,
        dt: c.dt,
        nonpositive: false,
    };
    let mut init = CalibInit::default_for(&st.mask, c.dt);
    init.phi = DVector::from_element(n, c.phi);
    init.r_f = c.r_f;
    let mut cc = CalibConfig {
        reg_lambda: c.reg_lambda,
        form: c.form.parse()?,
        ..CalibConfig::default()
    };
    cc.bfgs.max_iter = c.max_iter;
    cc.bfgs.grad_tol = c.grad_tol;
    let fit = if c.joint {
        calibrate_joint(&path, &st.mask, &init, &cc)?
    } else {
        calibrate(&path, &st.mask, &init, &cc)?
    };
    let levels = fitted_levels(&fit.params, &path.z);
    Ok((fit, levels))
}

pub fn run(cfg: &RunConfig, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let c = &cfg.calibrate;
    if !(c.dt > 0.0) {
        return Err(CliError::config("calibrate.dt must be > 0"));
    }
    let panel = load_market_caps_file(&c.caps)?;
    let needs_file = c.signals.iter().any(|s| s == "file" || s.starts_with("file:"));
    let file = if needs_file {
        if c.signal_file.is_empty() {
            return Err(CliError::config("file signals requested but calibrate.signal_file is empty"));
        }
        read_signal_file(Path::new(&c.signal_file), &panel.dates, &panel.tickers)?
    } else {
        Vec::new()
    };
    let kinds = file.first().map_or(0, |m| m.ncols());
    let sources = parse_sources(&c.signals, kinds)?;
    let inp = Inputs { panel, sources, file };

    let windows: Vec<(String, usize, usize)> = if c.per_year {
        inp.panel.year_windows().into_iter().map(|(y, s, e)| (y.to_string(), s, e)).collect()
    } else {
        vec![("all".to_string(), 0, inp.panel.n_dates())]
    };
    let mut fits = Vec::with_capacity(windows.len());
    for (label, s, e) in windows {
        let (fit, levels) = if e - s < c.min_dates.max(3) {
            (None, None)
        } else {
            let (f, l) = fit_window(c, &inp, cfg.seed, s, e)?;
            (Some(f), Some(l))
        };
        fits.push(WindowFit {
            label,
            start: s,
            end: e,
            fit,
            levels,
        });
    }
    write_outputs(&inp, &fits, out)
}

fn cell(fit: &Option<GmrFit>, f: impl Fn(&GmrFit) -> f64) -> String {
    fit.as_ref().map_or_else(|| "skip".to_string(), |g| format!("{:.6e}", f(g)))
}

fn write_outputs(inp: &Inputs, fits: &[WindowFit], out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let p = &inp.panel;
    let k = inp.sources.len();
    let labels: Vec<&str> = fits.iter().map(|w| w.label.as_str()).collect();
    let header: Vec<&str> = std::iter::once("ticker").chain(labels.iter().copied()).collect();
    let grid = |f: &dyn Fn(&GmrFit, usize) -> f64| {
        csv_text(
            &header,
            p.tickers.iter().enumerate().map(|(i, tk)| {
                std::iter::once(tk.clone()).chain(fits.iter().map(|w| cell(&w.fit, |g| f(g, i)))).collect()
            }),
        )
    };
    out.write("kappa.csv", grid(&|g, i| g.params.kappa[i]))?;
    out.write("sigma2.csv", grid(&|g, i| g.params.sigma2[i]))?;

    let wheader: Vec<&str> = ["ticker", "signal"].into_iter().chain(labels.iter().copied()).collect();
    let wrows = p.tickers.iter().enumerate().flat_map(|(i, tk)| {
        inp.sources.iter().enumerate().map(move |(j, (name, _))| {
            [tk.clone(), name.clone()]
                .into_iter()
                .chain(fits.iter().map(|w| cell(&w.fit, |g| g.params.w[(i, i * k + j)])))
                .collect()
        })
    });
    out.write("weights.csv", csv_text(&wheader, wrows))?;

    let mut unconverged = Vec::new();
    let mut status_rows = Vec::new();
    for w in fits {
        let status = match &w.fit {
            None => "skip".to_string(),
            Some(g) => {
                let bad = g.unconverged();
                for &i in &bad {
                    unconverged.push(format!("{}:{}", w.label, p.tickers[i]));
                }
                if bad.is_empty() { "ok".into() } else { "unconverged".into() }
            }
        };
        status_rows.push(vec![
            w.label.clone(),
            p.dates[w.start].to_string(),
            p.dates[w.end - 1].to_string(),
            (w.end - w.start).to_string(),
            status,
        ]);
    }
    out.write("windows.csv", csv_text(&["window", "first", "last", "dates", "status"], status_rows))?;
    out.write(
        "unconverged.csv",
        csv_text(
            &["window", "ticker"],
            unconverged.iter().map(|u| u.splitn(2, ':').map(String::from).collect()),
        ),
    )?;

    let mut level_rows = Vec::new();
    let mut series: Vec<LevelSeries> = p
        .tickers
        .iter()
        .map(|t| LevelSeries {
            ticker: t.clone(),
            points: Vec::new(),
        })
        .collect();
    for w in fits {
        if let Some(l) = &w.levels {
            for t in 0..l.nrows() {
                let d = w.start + t;
                for (i, tk) in p.tickers.iter().enumerate() {
                    let cap = p.caps[(d, i)];
                    level_rows.push(vec![p.dates[d].to_string(), tk.clone(), cap.to_string(), l[(t, i)].to_string()]);
                    series[i].points.push((d as f64, cap, l[(t, i)]));
                }
            }
        }
    }
    out.write("levels.csv", csv_text(&["date", "ticker", "cap", "level"], level_rows))?;
    level_plot(&out.file("levels.svg"), &series)?;
    out.note("levels.svg");

    let mut summary = vec![format!("rescale_factor {}", p.rescale_factor)];
    summary.extend(status_lines(fits));
    out.write("diagnostics.txt", summary.join("\n") + "\n")?;
    if !unconverged.is_empty() {
        return Err(CliError::unconverged(&unconverged));
    }
    Ok(summary)
}

fn status_lines(fits: &[WindowFit]) -> Vec<String> {
    fits.iter()
        .map(|w| match &w.fit {
            None => format!("window {} skipped ({} dates)", w.label, w.end - w.start),
            Some(g) => format!(
                "window {} assets {} unconverged {} iterations {}",
                w.label,
                g.assets.len(),
                g.unconverged().len(),
                g.assets.iter().map(|a| a.iterations).sum::<usize>()
            ),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_parse() {
        let s = parse_sources(&["ema:0.9".into(), "oracle".into(), "noise".into(), "file".into()], 2).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0].1, Source::Ema(0.9));
        assert_eq!(s[4], ("file:1".to_string(), Source::File(1)));
        assert!(parse_sources(&["ema".into()], 0).is_err());
        assert!(parse_sources(&["ema:x".into()], 0).is_err());
        assert!(parse_sources(&[], 0).is_err());
    }

    #[test]
    fn window_demeaning() {
        let v = demeaned(vec![1.0, 2.0, 3.0, f64::NAN], 3);
        assert_eq!(&v[..3], &[-1.0, 0.0, 1.0]);
    }
}
