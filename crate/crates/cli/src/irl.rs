use std::cell::RefCell;
use std::io::Write;
use std::path::Path;

use marketirl::entropy_rl::StationaryOptions;
use marketirl::irl_engine::{
    write_checkpoint, Checkpoint, EmConfig, EmMode, EmResult, EmState, FitMask, GradMode, TransitionBatch,
    UpdateRule,
};
use marketirl::ModelParams;

use crate::config::{IrlConfig, RunConfig, FIT_GROUPS};
use crate::fail::{CliError, NUMERIC};
use crate::io::{csv_text, read_rows, RunDir};
use crate::model::{initial_state, market_params, own_signal_mask, prior};
use crate::simulate::fmt_vec;

pub fn fit_mask(names: &[String]) -> Result<FitMask, CliError> {
    let mut m = FitMask::none();
    for n in names {
        let slot = match n.as_str() {
            "w" => &mut m.w,
            "mu" => &mut m.mu,
            "lambda" => &mut m.lambda,
            "beta" => &mut m.beta,
            "impact" => &mut m.impact,
            "upsilon" => &mut m.upsilon,
            "fees" => &mut m.fees,
            "sigma_r" => &mut m.sigma_r,
            "phi" => &mut m.phi,
            "sigma_z" => &mut m.sigma_z,
            other => {
                return Err(CliError::config(format!(
                    "irl.fit: unknown group {other:?}, expected one of {}",
                    FIT_GROUPS.join(", ")
                )))
            }
        };
        *slot = true;
    }
    Ok(m)
}

pub fn em_config(c: &IrlConfig, seed: u64) -> Result<EmConfig, CliError> {
    Ok(EmConfig {
        max_iter: c.max_iter,
        tol: c.tol,
        patience: c.patience,
        batch_size: (c.batch_size > 0).then_some(c.batch_size),
        seed,
        step_omega: c.step_omega,
        step_theta: c.step_theta,
        max_halvings: c.max_halvings,
        grad: c.grad.parse::<GradMode>()?,
        rule: c.rule.parse::<UpdateRule>()?,
        fit: fit_mask(&c.fit)?,
        stationary: StationaryOptions {
            tol: c.stationary_tol,
            max_iter: c.stationary_max_iter,
            damping: c.damping,
        },
        encoder_var: c.encoder_var,
        delta_ratio: c.delta_ratio,
        max_delta_ratio: c.max_delta_ratio,
        refresh_point: c.refresh_point,
    })
}

/// Natural-scale parameters as `key = [values]` lines.
pub fn theta_text(p: &ModelParams) -> String {
    let diag = |m: &nalgebra::DMatrix<f64>| m.diagonal().iter().copied().collect::<Vec<_>>();
    let lines = [
        ("rationality_index_beta", vec![p.beta]),
        ("w", p.w.transpose().iter().copied().collect()),
        ("mu", p.mu.iter().copied().collect()),
        ("lambda", vec![p.lambda]),
        ("gamma_plus", diag(&p.gamma_plus)),
        ("gamma_minus", diag(&p.gamma_minus)),
        ("upsilon", p.upsilon.transpose().iter().copied().collect()),
        ("nu_plus", p.nu_plus.iter().copied().collect()),
        ("nu_minus", p.nu_minus.iter().copied().collect()),
        ("sigma_r", diag(&p.sigma_r)),
        ("phi", p.phi.iter().copied().collect()),
        ("sigma_z", diag(&p.sigma_z)),
        ("gamma_disc", vec![p.gamma_disc]),
        ("r_f", vec![p.r_f]),
    ];
    lines
        .iter()
        .map(|(k, v)| format!("{k} = [{}]\n", v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(", ")))
        .collect()
}

pub fn run(cfg: &RunConfig, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let c = &cfg.irl;
    let mode: EmMode = c.mode.parse()?;
    let theta = market_params(&cfg.model)?;
    initial_state(&cfg.model, &theta)?;
    let pr = prior(&cfg.model, &theta)?;
    let states = read_rows(Path::new(&c.states))?;
    if states.len() < 2 {
        return Err(CliError::config(format!("{}: need at least two states", c.states)));
    }
    let actions = if c.actions.is_empty() {
        None
    } else {
        Some(read_rows(Path::new(&c.actions))?)
    };
    let batch = match mode {
        EmMode::Market => TransitionBatch::from_path(&states, actions.as_deref()),
        EmMode::Investor => {
            if c.horizon == 0 {
                return Err(CliError::config("irl.horizon must be positive"));
            }
            TransitionBatch::windows_of(&states, actions.as_deref(), c.horizon)
        }
    };
    batch.validate(theta.n_assets(), theta.n_y())?;
    let emc = em_config(c, cfg.seed)?;
    let mask = own_signal_mask(theta.n_assets(), theta.n_signals());
    let state = EmState::new(mode, theta, pr, &batch, &emc, Some(&mask)).map_err(to_em)?;

    let ckpt = out.file("checkpoint.txt");
    write_checkpoint(&ckpt, &Checkpoint::from_state(&state)).map_err(|e| CliError::io(&ckpt, e))?;
    out.note("checkpoint.txt");
    let diag_path = out.file("diagnostics.txt");
    let diag_file = std::fs::File::create(&diag_path).map_err(|e| CliError::io(&diag_path, e))?;
    out.note("diagnostics.txt");
    let sink = RefCell::new((std::io::BufWriter::new(diag_file), None::<CliError>));
    let result = state.run(&batch, &emc, |d, s| {
        let mut g = sink.borrow_mut();
        let (w, err) = &mut *g;
        if err.is_some() {
            return;
        }
        let r = writeln!(w, "{d}").and_then(|_| w.flush());
        if let Err(e) = r {
            *err = Some(CliError::io(&diag_path, e));
        } else if let Err(e) = write_checkpoint(&ckpt, &Checkpoint::from_state(s)) {
            *err = Some(CliError::io(&ckpt, e));
        }
    });
    let (mut w, err) = sink.into_inner();
    w.flush().map_err(|e| CliError::io(&diag_path, e))?;
    if let Some(e) = err {
        return Err(e);
    }
    let res = result.map_err(CliError::em)?;
    report(&res, batch.has_actions(), out)
}

fn to_em(e: marketirl::Error) -> CliError {
    let c = CliError::from(e.clone());
    if c.code == NUMERIC {
        CliError::em(e)
    } else {
        c
    }
}

fn report(res: &EmResult, complete: bool, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let s = &res.state;
    out.write(
        "history.csv",
        csv_text(
            &["iteration", "free_energy"],
            s.history.iter().enumerate().map(|(i, f)| vec![(i + 1).to_string(), f.to_string()]),
        ),
    )?;
    out.write("theta.txt", theta_text(&s.theta))?;
    let pol = s.policy();
    let mut lines = vec![
        format!("mode {:?}", s.mode),
        format!(
            "path {}",
            if complete { "complete-data (observed actions)" } else { "latent actions" }
        ),
        format!("iterations {}", s.iteration),
        format!("converged {}", res.converged),
        format!("rationality_index_beta {:e}", s.theta.beta),
    ];
    if let Some(f) = s.history.last() {
        lines.push(format!("final_free_energy {f:e}"));
    }
    lines.push(format!("policy_a0 {}", fmt_vec(pol.a0.iter())));
    lines.push(format!("policy_a1 {}", fmt_vec(pol.a1.iter())));
    lines.push(format!("policy_sigma {}", fmt_vec(pol.sigma_p.iter())));
    lines.push(format!("g_aa {}", fmt_vec(s.g().g_aa.iter())));
    lines.push(format!("f_yy {}", fmt_vec(s.f().f_yy.iter())));
    lines.push(format!("f_y {}", fmt_vec(s.f().f_y.iter())));
    lines.push(format!("f0 {}", s.f().f0));
    out.write("report.txt", lines.join("\n") + "\n")?;
    Ok(lines)
}
