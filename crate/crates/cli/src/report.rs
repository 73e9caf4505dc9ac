use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::fail::CliError;
use crate::io::{csv_text, read_manifest, RunDir};
use crate::plot::{level_plot, LevelSeries};

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::config(format!("missing input {}: {e}", path.display())))?;
    let head = rdr
        .headers()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        rows.push(r.iter().map(String::from).collect());
    }
    Ok((head, rows))
}

/// Fixed-width rendering with the first column left-aligned.
pub fn render(t: &Table) -> String {
    let ncol = t.0.len();
    let mut width = vec![0usize; ncol];
    for row in std::iter::once(&t.0).chain(t.1.iter()) {
        for (j, c) in row.iter().enumerate().take(ncol) {
            width[j] = width[j].max(c.chars().count());
        }
    }
    let line = |row: &Vec<String>| {
        row.iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = width[j]) } else { format!("{c:>w$}", w = width[j]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(&t.0)];
    out.push("-".repeat(width.iter().sum::<usize>() + 2 * ncol.saturating_sub(1)));
    out.extend(t.1.iter().map(line));
    out.join("\n") + "\n"
}

/// Tickers × windows grid merged over runs; columns are prefixed by run when
/// more than one run contributes.
struct Grid {
    columns: Vec<String>,
    cells: BTreeMap<String, BTreeMap<String, String>>,
}

impl Grid {
    fn new() -> Self {
        Grid {
            columns: Vec::new(),
            cells: BTreeMap::new(),
        }
    }

    fn add(&mut self, run: &str, t: &Table, prefix: bool) {
        for col in t.0.iter().skip(1) {
            let name = if prefix { format!("{run}:{col}") } else { col.clone() };
            self.columns.push(name);
        }
        let base = self.columns.len() - (t.0.len() - 1);
        for row in &t.1 {
            let entry = self.cells.entry(row[0].clone()).or_default();
            for (j, v) in row.iter().enumerate().skip(1) {
                entry.insert(self.columns[base + j - 1].clone(), v.clone());
            }
        }
    }

    fn table(&self) -> Table {
        let head = std::iter::once("ticker".to_string()).chain(self.columns.iter().cloned()).collect();
        let rows = self
            .cells
            .iter()
            .map(|(tk, m)| {
                std::iter::once(tk.clone())
                    .chain(self.columns.iter().map(|c| m.get(c).cloned().unwrap_or_else(|| "-".into())))
                    .collect()
            })
            .collect();
        (head, rows)
    }
}

pub fn run(cfg: &RunConfig, out: &mut RunDir) -> Result<Vec<String>, CliError> {
    let inputs = &cfg.report.inputs;
    if inputs.is_empty() {
        return Err(CliError::config("report.inputs is empty"));
    }
    let manifests = inputs
        .iter()
        .map(|d| read_manifest(Path::new(d)).map(|m| (d.clone(), m)))
        .collect::<Result<Vec<_>, _>>()?;
    let n_cal = manifests.iter().filter(|(_, m)| m.command == "calibrate-gmr").count();
    let mut kappa = Grid::new();
    let mut sigma2 = Grid::new();
    let mut level_rows = Vec::new();
    let mut series: BTreeMap<String, LevelSeries> = BTreeMap::new();
    let mut text = Vec::new();

    for (dir, m) in &manifests {
        let d = Path::new(dir);
        text.push(format!("== {dir} ({}, seed {}, status {}) ==\n", m.command, m.seed, m.status));
        let file = |name: &str| -> Result<String, CliError> {
            let p = d.join(name);
            std::fs::read_to_string(&p).map_err(|e| CliError::config(format!("missing input {}: {e}", p.display())))
        };
        let listed = |name: &str| m.outputs.iter().any(|o| o == name);
        match m.command.as_str() {
            "simulate" => text.push(file("diagnostics.txt")?),
            "irl" => {
                if listed("report.txt") {
                    text.push(file("report.txt")?);
                    text.push(file("theta.txt")?);
                } else {
                    text.push("no final report; see checkpoint.txt\n".into());
                }
            }
            "calibrate-gmr" => {
                let k = read_table(&d.join("kappa.csv"))?;
                let s = read_table(&d.join("sigma2.csv"))?;
                let w = read_table(&d.join("weights.csv"))?;
                text.push(format!("kappa\n{}", render(&k)));
                text.push(format!("sigma2\n{}", render(&s)));
                text.push(format!("weights\n{}", render(&w)));
                kappa.add(dir, &k, n_cal > 1);
                sigma2.add(dir, &s, n_cal > 1);
                let (_, rows) = read_table(&d.join("levels.csv"))?;
                for (i, r) in rows.iter().enumerate() {
                    let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::config(format!("{dir}/levels.csv row {}: bad number", i + 1)));
                    let (cap, level) = (num(&r[2])?, num(&r[3])?);
                    let key = if n_cal > 1 { format!("{dir}:{}", r[1]) } else { r[1].clone() };
                    let s = series.entry(key.clone()).or_insert_with(|| LevelSeries {
                        ticker: key,
                        points: Vec::new(),
                    });
                    let x = s.points.len() as f64;
                    s.points.push((x, cap, level));
                    level_rows.push(vec![dir.clone(), r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone()]);
                }
            }
            other => return Err(CliError::config(format!("{dir}: unknown command {other:?} in manifest"))),
        }
    }
    if n_cal > 1 {
        text.push(format!("== merged kappa ==\n{}", render(&kappa.table())));
        text.push(format!("== merged sigma2 ==\n{}", render(&sigma2.table())));
    }
    if n_cal > 0 {
        let k = kappa.table();
        out.write("kappa.csv", csv_text(&k.0.iter().map(String::as_str).collect::<Vec<_>>(), k.1))?;
        let s = sigma2.table();
        out.write("sigma2.csv", csv_text(&s.0.iter().map(String::as_str).collect::<Vec<_>>(), s.1))?;
        out.write(
            "level_vs_cap.csv",
            csv_text(&["run", "date", "ticker", "cap", "level"], level_rows),
        )?;
        let all: Vec<LevelSeries> = series.into_values().collect();
        level_plot(&out.file("level_vs_cap.svg"), &all)?;
        out.note("level_vs_cap.svg");
    }
    let body = text.join("\n");
    out.write("report.txt", &body)?;
    Ok(body.lines().map(String::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_aligns() {
        let t = (
            vec!["ticker".into(), "2020".into()],
            vec![vec!["A".into(), "1.0".into()], vec!["LONGER".into(), "10.25".into()]],
        );
        let r = render(&t);
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].len(), lines[3].len());
        assert!(lines[2].starts_with("A "));
    }

    #[test]
    fn grid_merges_runs() {
        let a = (vec!["ticker".into(), "2020".into()], vec![vec!["X".into(), "1".into()]]);
        let b = (vec!["ticker".into(), "2020".into()], vec![vec!["Y".into(), "2".into()]]);
        let mut g = Grid::new();
        g.add("r1", &a, true);
        g.add("r2", &b, true);
        let (h, rows) = g.table();
        assert_eq!(h, vec!["ticker", "r1:2020", "r2:2020"]);
        assert_eq!(rows[0], vec!["X", "1", "-"]);
        assert_eq!(rows[1], vec!["Y", "-", "2"]);
    }
}
