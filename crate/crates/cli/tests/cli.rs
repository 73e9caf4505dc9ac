use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_marketirl"))
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    /// Run a verb with a config written to `<out>.toml`.
    fn exec(&self, verb: &str, out: &str, config: &str, extra: &[&str]) -> Output {
        let cfg = self.config(&format!("{out}.toml"), config);
        bin()
            .current_dir(self.dir.path())
            .arg(verb)
            .arg("--config")
            .arg(cfg)
            .arg("--out")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rows of a `ticker,<cols..>` table keyed by ticker.
fn table(text: &str) -> BTreeMap<String, Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(String::from);
            (it.next().unwrap(), it.collect())
        })
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn zero_steps_write_header_only_files() {
    let r = Run::new();
    let o = r.exec("simulate", "sim", "[simulate]\nsteps = 0\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r.read("sim/caps.csv"), "date,ticker,cap\n");
    assert_eq!(r.read("sim/signals.csv"), "date,ticker,signal,value\n");
    let o = r.exec("simulate", "mkt", "[simulate]\nmodel = \"market\"\nsteps = 0\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r.read("mkt/states.csv"), "t,x0,z0,z1\n");
    assert_eq!(r.read("mkt/actions.csv"), "t,u_plus0,u_minus0\n");
}

#[test]
fn fixed_seed_is_byte_identical() {
    let r = Run::new();
    for out in ["a", "b"] {
        let o = r.exec("simulate", out, "seed = 11\n[simulate]\nsteps = 40\n", &[]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(files(&r.path("a")), files(&r.path("b")));
    let o = r.exec("simulate", "c", "seed = 12\n[simulate]\nsteps = 40\n", &[]);
    assert_eq!(code(&o), 0);
    assert_ne!(r.read("a/caps.csv"), r.read("c/caps.csv"));

    let cal = "[calibrate]\ncaps = \"a/caps.csv\"\nsignals = [\"file\"]\nsignal_file = \"a/signals.csv\"\nper_year = false\n";
    for out in ["ca", "cb"] {
        assert_eq!(code(&r.exec("calibrate-gmr", out, cal, &["--threads", "2"])), 0);
    }
    assert_eq!(files(&r.path("ca")), files(&r.path("cb")));
}

#[test]
fn seed_flag_overrides_config() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "a", "seed = 1\n[simulate]\nsteps = 5\n", &["--seed", "9"])), 0);
    assert_eq!(code(&r.exec("simulate", "b", "seed = 9\n[simulate]\nsteps = 5\n", &[])), 0);
    assert_eq!(r.read("a/caps.csv"), r.read("b/caps.csv"));
    assert!(r.read("a/manifest.toml").contains("seed = 9"));
    assert!(r.read("a/resolved.toml").contains("seed = 9"));
}

#[test]
fn vanishing_mean_reversion_matches_lognormal_reference() {
    let r = Run::new();
    let base = "seed = 4\n[simulate]\nsteps = 300\nkappa = [0.0, 0.0, 0.0]\nphi = [0.0, 0.0, 0.0]\n";
    assert_eq!(code(&r.exec("simulate", "gmr", base, &[])), 0);
    let lognormal = format!("{base}model = \"lognormal\"\n");
    assert_eq!(code(&r.exec("simulate", "ref", &lognormal, &[])), 0);
    assert_eq!(r.read("gmr/signals.csv"), r.read("ref/signals.csv"));
    let caps = |p: &str| -> Vec<f64> { r.read(p).lines().skip(1).map(|l| num(l.rsplit(',').next().unwrap())).collect() };
    let (a, b) = (caps("gmr/caps.csv"), caps("ref/caps.csv"));
    assert_eq!(a.len(), 900);
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn calibration_recovers_simulated_parameters() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "sim", "seed = 5\n[simulate]\nsteps = 2000\n", &[])), 0);
    let cal = "[calibrate]\ncaps = \"sim/caps.csv\"\nsignals = [\"file\"]\nsignal_file = \"sim/signals.csv\"\nper_year = false\n";
    let o = r.exec("calibrate-gmr", "cal", cal, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let diag = r.read("cal/diagnostics.txt");
    let c = num(diag.lines().next().unwrap().split(' ').nth(1).unwrap());
    // caps are rescaled by c, so the fitted level coefficient is κ·c
    let want_kappa = 25.2 * c;
    for (tk, v) in table(&r.read("cal/kappa.csv")) {
        let k = num(&v[0]);
        assert!((k / want_kappa - 1.0).abs() < 0.1, "{tk} kappa {k} vs {want_kappa}");
    }
    for (tk, v) in table(&r.read("cal/sigma2.csv")) {
        let s = num(&v[0]);
        assert!((s / 1e-4 - 1.0).abs() < 0.1, "{tk} sigma2 {s}");
    }
    let weights = r.read("cal/weights.csv");
    for line in weights.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let want = if f[1] == "file:0" { 0.02 } else { 0.01 };
        assert!((num(f[2]) - want).abs() < 0.006, "{line}");
    }
    assert!(r.read("cal/levels.svg").starts_with("<svg"));
    assert_eq!(r.read("cal/levels.csv").lines().count(), 1 + 3 * 2000);
}

#[test]
fn oracle_signals_leave_far_smaller_variance_than_ema() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "sim", "seed = 5\n[simulate]\nsteps = 2000\n", &[])), 0);
    let cal = |signals: &str| {
        format!("[calibrate]\ncaps = \"sim/caps.csv\"\nsignals = {signals}\nper_year = false\nphi = 0.0\n")
    };
    let o = r.exec("calibrate-gmr", "ema", &cal("[\"ema:0.9\", \"ema:0.96\"]"), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = r.exec("calibrate-gmr", "orc", &cal("[\"oracle\", \"noise\"]"), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (e, q) = (table(&r.read("ema/sigma2.csv")), table(&r.read("orc/sigma2.csv")));
    for (tk, v) in &e {
        let ratio = num(&v[0]) / num(&q[tk][0]);
        assert!(ratio > 1e3, "{tk} ratio {ratio}");
    }
    let w = r.read("orc/weights.csv");
    let get = |tk: &str, sig: &str| {
        num(w.lines().find(|l| l.starts_with(&format!("{tk},{sig},"))).unwrap().rsplit(',').next().unwrap())
    };
    for tk in ["AAA", "BBB", "CCC"] {
        assert!(get(tk, "oracle") >= 10.0 * get(tk, "noise"));
    }
}

#[test]
fn short_year_windows_are_skipped_explicitly() {
    let r = Run::new();
    let mut csv = String::from("date,ticker,cap\n");
    // two dates at the end of 2019, then most of 2020
    let mut x = [1.0f64, 2.0];
    for (i, d) in ["2019-12-30", "2019-12-31"].iter().enumerate() {
        csv += &format!("{d},AA,{}\n{d},BB,{}\n", x[0] + i as f64 * 0.01, x[1]);
    }
    let start = chrono_like_days(2020, 60);
    for (t, d) in start.iter().enumerate() {
        x[0] *= 1.0 + 0.01 * ((t * 7 % 11) as f64 - 5.0) / 5.0;
        x[1] *= 1.0 + 0.01 * ((t * 5 % 13) as f64 - 6.0) / 6.0;
        csv += &format!("{d},AA,{}\n{d},BB,{}\n", x[0], x[1]);
    }
    std::fs::write(r.path("caps.csv"), csv).unwrap();
    let o = r.exec("calibrate-gmr", "cal", "[calibrate]\ncaps = \"caps.csv\"\nmin_dates = 20\n", &[]);
    assert!(code(&o) == 0 || code(&o) == 4, "{}", stderr(&o));
    let k = r.read("cal/kappa.csv");
    assert!(k.starts_with("ticker,2019,2020\n"), "{k}");
    for (_, v) in table(&k) {
        assert_eq!(v[0], "skip");
        assert_ne!(v[1], "skip");
    }
    assert!(r.read("cal/windows.csv").contains("2019,2019-12-30,2019-12-31,2,skip"));
}

/// `n` ISO dates from January 1st of `year`, one per day.
fn chrono_like_days(year: i32, n: usize) -> Vec<String> {
    let days = [31, 29, 31, 30];
    let mut out = Vec::new();
    'outer: for (m, &len) in days.iter().enumerate() {
        for d in 1..=len {
            if out.len() == n {
                break 'outer;
            }
            out.push(format!("{year}-{:02}-{d:02}", m + 1));
        }
    }
    out
}

#[test]
fn unconverged_assets_exit_4_with_tables() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "sim", "[simulate]\nsteps = 300\n", &[])), 0);
    let o = r.exec(
        "calibrate-gmr",
        "cal",
        "[calibrate]\ncaps = \"sim/caps.csv\"\nper_year = false\nmax_iter = 1\n",
        &[],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("all:AAA"));
    assert_eq!(table(&r.read("cal/kappa.csv")).len(), 3);
    assert!(r.read("cal/unconverged.csv").lines().count() > 1);
    assert!(r.read("cal/manifest.toml").contains("exit 4"));
}

#[test]
fn configuration_errors_exit_2() {
    let r = Run::new();
    let o = r.exec("simulate", "a", "[simulate]\nstepz = 3\n", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
    assert_eq!(code(&r.exec("simulate", "b", "[simulate]\nmodel = \"brownian\"\n", &[])), 2);
    assert_eq!(code(&r.exec("simulate", "c", "[simulate]\nkappa = [1.0]\n", &[])), 2);
    assert_eq!(code(&r.exec("calibrate-gmr", "d", "[calibrate]\ncaps = \"nope.csv\"\n", &[])), 2);
    assert_eq!(code(&r.exec("irl", "e", "[irl]\nstates = \"nope.csv\"\n", &[])), 2);
    assert_eq!(code(&r.exec("simulate", "f", "", &["--threads", "0"])), 2);
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().arg("simulate").arg("--config").arg(r.path("missing.toml")).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn nonpositive_caps_exit_3() {
    let r = Run::new();
    let o = r.exec("simulate", "sim", "[simulate]\nsteps = 200\nsigma2 = [4.0, 4.0, 4.0]\n", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(r.read("sim/diagnostics.txt").contains("nonpositive 1"));
}

#[test]
fn defaults_are_logged() {
    let r = Run::new();
    let o = r.exec("simulate", "a", "[simulate]\nsteps = 2\n", &[]);
    let e = stderr(&o);
    assert!(e.contains("default: seed = 42"));
    assert!(e.contains("default: simulate.dt"));
    assert!(!e.contains("default: simulate.steps"));
    assert!(r.read("a/resolved.toml").contains("steps = 2"));
}

const MARKET: &str = "seed = 3\n[simulate]\nmodel = \"market\"\nsteps = 40\n";

#[test]
fn irl_with_no_iterations_echoes_initialization() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "mkt", MARKET, &[])), 0);
    let o = r.exec("irl", "fit", "[irl]\nstates = \"mkt/states.csv\"\nmax_iter = 0\n[model]\nbeta = 2.5\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r.read("fit/history.csv"), "iteration,free_energy\n");
    let theta: toml::Table = toml::from_str(&r.read("fit/theta.txt")).unwrap();
    assert_eq!(theta["rationality_index_beta"][0].as_float(), Some(2.5));
    assert_eq!(theta["mu"][0].as_float(), Some(0.05));
    assert!(r.read("fit/report.txt").contains("iterations 0"));
    assert!(r.read("fit/checkpoint.txt").len() > 100);
}

#[test]
fn irl_history_is_monotone() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "mkt", MARKET, &[])), 0);
    let o = r.exec("irl", "fit", "[irl]\nstates = \"mkt/states.csv\"\nmax_iter = 15\ntol = 0.0\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h: Vec<f64> = r.read("fit/history.csv").lines().skip(1).map(|l| num(l.split(',').nth(1).unwrap())).collect();
    assert_eq!(h.len(), 15);
    assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-8 * w[0].abs()), "{h:?}");
    assert_eq!(r.read("fit/diagnostics.txt").lines().count(), 15);
    assert!(r.read("fit/report.txt").contains("path latent actions"));
}

#[test]
fn investor_mode_with_actions_takes_complete_data_path() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "mkt", MARKET, &[])), 0);
    let cfg = "[irl]\nmode = \"investor\"\nstates = \"mkt/states.csv\"\nactions = \"mkt/actions.csv\"\nhorizon = 4\nmax_iter = 3\n";
    let o = r.exec("irl", "fit", cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = r.read("fit/report.txt");
    assert!(rep.contains("mode Investor"));
    assert!(rep.contains("complete-data"), "{rep}");
}

#[test]
fn em_failure_exits_5_and_keeps_checkpoint() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "mkt", MARKET, &[])), 0);
    let cfg = "[irl]\nstates = \"mkt/states.csv\"\nrule = \"as-written\"\nstep_theta = 1000.0\nmax_iter = 5\n";
    let o = r.exec("irl", "fit", cfg, &[]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(r.read("fit/checkpoint.txt").starts_with("marketirl-checkpoint"));
    assert!(r.read("fit/manifest.toml").contains("exit 5"));
}

#[test]
fn report_merges_runs_and_names_bad_manifests() {
    let r = Run::new();
    assert_eq!(code(&r.exec("simulate", "sim", "[simulate]\nsteps = 600\n", &[])), 0);
    let o = r.exec("calibrate-gmr", "cal", "[calibrate]\ncaps = \"sim/caps.csv\"\n", &[]);
    assert!(code(&o) == 0 || code(&o) == 4, "{}", stderr(&o));

    let o = r.exec("report", "one", "[report]\ninputs = [\"sim\"]\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r.read("one/report.txt").matches("== ").count(), 1);

    let o = r.exec("report", "rep", "[report]\ninputs = [\"sim\", \"cal\"]\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = r.read("rep/report.txt");
    assert!(text.contains("kappa\nticker"), "{text}");
    let k = r.read("rep/kappa.csv");
    assert!(k.starts_with("ticker,2000,2001,2002"), "{k}");
    assert_eq!(k.lines().count(), 4);
    assert!(r.read("rep/level_vs_cap.svg").starts_with("<svg"));

    std::fs::write(r.path("cal/manifest.toml"), "command = 7\n").unwrap();
    let o = r.exec("report", "bad", "[report]\ninputs = [\"cal\"]\n", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corrupted manifest"), "{}", stderr(&o));
    let o = r.exec("report", "gone", "[report]\ninputs = [\"nowhere\"]\n", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing input"));
    assert_eq!(code(&r.exec("report", "empty", "", &[])), 2);
}
