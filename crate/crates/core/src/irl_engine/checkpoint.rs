//! Versioned key-value text serialization of the EM state.
//!
//! One entry per line: `key value` for scalars and `key rows cols v…` for
//! matrices and vectors, values row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::em::{EmMode, EmState};
use super::VariationalParams;
use crate::entropy_rl::{GaussianPolicy, LinearizationPoint, QuadraticF, QuadraticG};
use crate::error::{Error, Result};
use crate::model_core::ModelParams;

const HEADER: &str = "marketirl-checkpoint";
const VERSION: u32 = 1;

/// Snapshot of a run: parameters, recognition model, fitted policy and history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: EmMode,
    pub iteration: usize,
    pub step_omega: f64,
    pub step_theta: f64,
    pub theta: ModelParams,
    pub omega: VariationalParams,
    pub prior: GaussianPolicy,
    pub policy: GaussianPolicy,
    pub g: QuadraticG,
    pub f: QuadraticF,
    pub points: Vec<LinearizationPoint>,
    pub history: Vec<f64>,
}

impl Checkpoint {
    pub fn from_state(s: &EmState) -> Self {
        Checkpoint {
            mode: s.mode,
            iteration: s.iteration,
            step_omega: s.step_omega,
            step_theta: s.step_theta,
            theta: s.theta.clone(),
            omega: s.omega.clone(),
            prior: s.prior.clone(),
            policy: s.policy().clone(),
            g: s.g().clone(),
            f: s.f().clone(),
            points: s.points.clone(),
            history: s.history.clone(),
        }
    }
}

fn put_s(out: &mut String, key: &str, v: f64) {
    let _ = writeln!(out, "{key} {v:?}");
}

fn put_m(out: &mut String, key: &str, m: &DMatrix<f64>) {
    let _ = write!(out, "{key} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let _ = write!(out, " {:?}", m[(i, j)]);
        }
    }
    out.push('\n');
}

fn put_v(out: &mut String, key: &str, v: &DVector<f64>) {
    put_m(out, key, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
}

pub fn write_checkpoint_string(c: &Checkpoint) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "{HEADER} {VERSION}");
    let _ = writeln!(
        o,
        "mode {}",
        match c.mode {
            EmMode::Market => "market",
            EmMode::Investor => "investor",
        }
    );
    let _ = writeln!(o, "iteration {}", c.iteration);
    put_s(&mut o, "step_omega", c.step_omega);
    put_s(&mut o, "step_theta", c.step_theta);
    let t = &c.theta;
    put_s(&mut o, "theta.r_f", t.r_f);
    put_m(&mut o, "theta.w", &t.w);
    put_v(&mut o, "theta.mu", &t.mu);
    put_m(&mut o, "theta.sigma_r", &t.sigma_r);
    put_v(&mut o, "theta.phi", &t.phi);
    put_m(&mut o, "theta.sigma_z", &t.sigma_z);
    put_s(&mut o, "theta.lambda", t.lambda);
    put_m(&mut o, "theta.gamma_plus", &t.gamma_plus);
    put_m(&mut o, "theta.gamma_minus", &t.gamma_minus);
    put_m(&mut o, "theta.upsilon", &t.upsilon);
    put_v(&mut o, "theta.nu_plus", &t.nu_plus);
    put_v(&mut o, "theta.nu_minus", &t.nu_minus);
    put_s(&mut o, "theta.gamma_disc", t.gamma_disc);
    put_s(&mut o, "theta.beta", t.beta);
    let w = &c.omega;
    put_v(&mut o, "omega.mu_a", &w.mu_a);
    put_m(&mut o, "omega.lambda_a", &w.lambda_a);
    put_m(&mut o, "omega.sigma_a", &w.sigma_a);
    put_v(&mut o, "omega.mu_phi", &w.mu_phi);
    put_m(&mut o, "omega.lambda_phi", &w.lambda_phi);
    put_m(&mut o, "omega.sigma_phi", &w.sigma_phi);
    put_v(&mut o, "omega.mu_varphi", &w.mu_varphi);
    put_m(&mut o, "omega.lambda_varphi_1", &w.lambda_varphi_1);
    put_m(&mut o, "omega.lambda_varphi_2", &w.lambda_varphi_2);
    put_m(&mut o, "omega.sigma_varphi", &w.sigma_varphi);
    put_m(&mut o, "omega.sigma_delta", &w.sigma_delta);
    for (name, p) in [("prior", &c.prior), ("policy", &c.policy)] {
        put_v(&mut o, &format!("{name}.a0"), &p.a0);
        put_m(&mut o, &format!("{name}.a1"), &p.a1);
        put_m(&mut o, &format!("{name}.sigma_p"), &p.sigma_p);
    }
    put_m(&mut o, "g.g_aa", &c.g.g_aa);
    put_m(&mut o, "g.g_yy", &c.g.g_yy);
    put_m(&mut o, "g.g_ay", &c.g.g_ay);
    put_v(&mut o, "g.g_a", &c.g.g_a);
    put_v(&mut o, "g.g_y", &c.g.g_y);
    put_s(&mut o, "g.g0", c.g.g0);
    put_m(&mut o, "f.f_yy", &c.f.f_yy);
    put_v(&mut o, "f.f_y", &c.f.f_y);
    put_s(&mut o, "f.f0", c.f.f0);
    let _ = writeln!(o, "points {}", c.points.len());
    for (k, p) in c.points.iter().enumerate() {
        put_v(&mut o, &format!("point.{k}.a_bar"), &p.a_bar);
        put_v(&mut o, &format!("point.{k}.y_bar"), &p.y_bar);
        put_v(&mut o, &format!("point.{k}.y_bar_next"), &p.y_bar_next);
    }
    put_v(&mut o, "history", &DVector::from_column_slice(&c.history));
    o
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint_string(c)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

struct Entries(BTreeMap<String, Vec<String>>);

impl Entries {
    fn raw(&self, key: &str) -> Result<&[String]> {
        self.0
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("checkpoint is missing '{key}'")))
    }

    fn num(s: &str, key: &str) -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Data(format!("checkpoint entry '{key}' has a bad number '{s}'")))
    }

    fn scalar(&self, key: &str) -> Result<f64> {
        match self.raw(key)? {
            [v] => Self::num(v, key),
            _ => Err(Error::Data(format!("checkpoint entry '{key}' is not a scalar"))),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        match self.raw(key)? {
            [v] => v
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint entry '{key}' is not an integer"))),
            _ => Err(Error::Data(format!("checkpoint entry '{key}' is not an integer"))),
        }
    }

    fn matrix(&self, key: &str) -> Result<DMatrix<f64>> {
        let v = self.raw(key)?;
        let bad = || Error::Data(format!("checkpoint entry '{key}' is not a matrix"));
        if v.len() < 2 {
            return Err(bad());
        }
        let r: usize = v[0].parse().map_err(|_| bad())?;
        let c: usize = v[1].parse().map_err(|_| bad())?;
        if v.len() != 2 + r * c {
            return Err(Error::Data(format!(
                "checkpoint entry '{key}' declares {r}x{c} but has {} values",
                v.len() - 2
            )));
        }
        let vals = v[2..].iter().map(|s| Self::num(s, key)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_row_slice(r, c, &vals))
    }

    fn vector(&self, key: &str) -> Result<DVector<f64>> {
        let m = self.matrix(key)?;
        if m.ncols() != 1 && m.nrows() != 0 {
            return Err(Error::Data(format!("checkpoint entry '{key}' is not a column vector")));
        }
        Ok(DVector::from_column_slice(m.as_slice()))
    }

    fn policy(&self, name: &str) -> Result<GaussianPolicy> {
        Ok(GaussianPolicy {
            a0: self.vector(&format!("{name}.a0"))?,
            a1: self.matrix(&format!("{name}.a1"))?,
            sigma_p: self.matrix(&format!("{name}.sigma_p"))?,
        })
    }
}

pub fn read_checkpoint_str(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines();
    let head = lines.next().unwrap_or_default();
    let mut hp = head.split_whitespace();
    if hp.next() != Some(HEADER) {
        return Err(Error::Data("not a checkpoint file (bad header)".into()));
    }
    let version: u32 = hp
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data("checkpoint header has no version".into()))?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut map = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        if map.insert(key.to_string(), parts.map(str::to_string).collect()).is_some() {
            return Err(Error::Data(format!("duplicate checkpoint key '{key}' on line {}", n + 2)));
        }
    }
    let e = Entries(map);
    let mode = match e.raw("mode")? {
        [m] => m.parse::<EmMode>()?,
        _ => return Err(Error::Data("bad checkpoint mode".into())),
    };
    let theta = ModelParams {
        r_f: e.scalar("theta.r_f")?,
        w: e.matrix("theta.w")?,
        mu: e.vector("theta.mu")?,
        sigma_r: e.matrix("theta.sigma_r")?,
        phi: e.vector("theta.phi")?,
        sigma_z: e.matrix("theta.sigma_z")?,
        lambda: e.scalar("theta.lambda")?,
        gamma_plus: e.matrix("theta.gamma_plus")?,
        gamma_minus: e.matrix("theta.gamma_minus")?,
        upsilon: e.matrix("theta.upsilon")?,
        nu_plus: e.vector("theta.nu_plus")?,
        nu_minus: e.vector("theta.nu_minus")?,
        gamma_disc: e.scalar("theta.gamma_disc")?,
        beta: e.scalar("theta.beta")?,
    };
    let omega = VariationalParams {
        mu_a: e.vector("omega.mu_a")?,
        lambda_a: e.matrix("omega.lambda_a")?,
        sigma_a: e.matrix("omega.sigma_a")?,
        mu_phi: e.vector("omega.mu_phi")?,
        lambda_phi: e.matrix("omega.lambda_phi")?,
        sigma_phi: e.matrix("omega.sigma_phi")?,
        mu_varphi: e.vector("omega.mu_varphi")?,
        lambda_varphi_1: e.matrix("omega.lambda_varphi_1")?,
        lambda_varphi_2: e.matrix("omega.lambda_varphi_2")?,
        sigma_varphi: e.matrix("omega.sigma_varphi")?,
        sigma_delta: e.matrix("omega.sigma_delta")?,
    };
    let n_points = e.usize("points")?;
    let points = (0..n_points)
        .map(|k| {
            Ok(LinearizationPoint {
                a_bar: e.vector(&format!("point.{k}.a_bar"))?,
                y_bar: e.vector(&format!("point.{k}.y_bar"))?,
                y_bar_next: e.vector(&format!("point.{k}.y_bar_next"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cp = Checkpoint {
        mode,
        iteration: e.usize("iteration")?,
        step_omega: e.scalar("step_omega")?,
        step_theta: e.scalar("step_theta")?,
        theta,
        omega,
        prior: e.policy("prior")?,
        policy: e.policy("policy")?,
        g: QuadraticG {
            g_aa: e.matrix("g.g_aa")?,
            g_yy: e.matrix("g.g_yy")?,
            g_ay: e.matrix("g.g_ay")?,
            g_a: e.vector("g.g_a")?,
            g_y: e.vector("g.g_y")?,
            g0: e.scalar("g.g0")?,
        },
        f: QuadraticF {
            f_yy: e.matrix("f.f_yy")?,
            f_y: e.vector("f.f_y")?,
            f0: e.scalar("f.f0")?,
        },
        points,
        history: e.vector("history")?.as_slice().to_vec(),
    };
    cp.theta.validate()?;
    cp.omega.validate()?;
    Ok(cp)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_checkpoint_str(&text)
}
