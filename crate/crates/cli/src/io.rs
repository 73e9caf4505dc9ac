use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fail::CliError;

pub const MANIFEST: &str = "manifest.toml";
pub const RESOLVED: &str = "resolved.toml";

/// Output directory of one run; remembers what it wrote for the manifest.
pub struct RunDir {
    pub path: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.file(name);
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        self.note(name);
        Ok(())
    }

    /// Record a file written by someone else.
    pub fn note(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn finish(mut self, command: &str, seed: u64, status: &str, resolved: &str) -> Result<(), CliError> {
        self.write(RESOLVED, resolved)?;
        let m = Manifest {
            command: command.to_string(),
            seed,
            status: status.to_string(),
            outputs: self.outputs.clone(),
        };
        let text = toml::to_string(&m).expect("manifest serializes");
        let p = self.file(MANIFEST);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub status: String,
    pub outputs: Vec<String>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let p = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::config(format!("missing input {}: {e}", p.display())))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| CliError::config(format!("corrupted manifest {}: {e}", p.display())))?;
    for o in &m.outputs {
        if !dir.join(o).is_file() {
            return Err(CliError::config(format!(
                "corrupted manifest {}: listed output {o} is missing",
                p.display()
            )));
        }
    }
    Ok(m)
}

/// CSV text from a header and rows.
pub fn csv_text<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// `count` weekdays following `start`.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        d += Duration::days(1);
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
    }
    out
}

pub fn parse_date(s: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| CliError::config(format!("bad date {s:?}: {e}")))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::config(format!("missing input {}: {e}", path.display())))
}

/// Numeric table with a leading index column; returns one vector per row.
pub fn read_rows(path: &Path) -> Result<Vec<DVector<f64>>, CliError> {
    let mut rdr = open_csv(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let vals: Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| CliError::config(format!("{} row {}: {e}", path.display(), i + 1)))?;
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

pub fn write_rows(header: &[String], rows: &[DVector<f64>]) -> String {
    let h: Vec<&str> = std::iter::once("t").chain(header.iter().map(String::as_str)).collect();
    csv_text(
        &h,
        rows.iter()
            .enumerate()
            .map(|(t, r)| std::iter::once(t.to_string()).chain(r.iter().map(|v| v.to_string())).collect()),
    )
}

/// Long-format signals `date,ticker,signal,value` aligned to `dates × tickers`.
/// Returns one `dates × K` matrix per ticker.
pub fn read_signal_file(path: &Path, dates: &[NaiveDate], tickers: &[String]) -> Result<Vec<DMatrix<f64>>, CliError> {
    let mut rdr = open_csv(path)?;
    let head: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_ascii_lowercase)
        .collect();
    if head != ["date", "ticker", "signal", "value"] {
        return Err(CliError::config(format!(
            "{}: header must be date,ticker,signal,value",
            path.display()
        )));
    }
    let mut cells: BTreeMap<(String, usize, NaiveDate), f64> = BTreeMap::new();
    let mut kinds = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| CliError::config(format!("{}: bad {what} in {:?}", path.display(), rec));
        let d = parse_date(&rec[0])?;
        let k: usize = rec[2].parse().map_err(|_| bad("signal index"))?;
        let v: f64 = rec[3].parse().map_err(|_| bad("value"))?;
        kinds = kinds.max(k + 1);
        cells.insert((rec[1].to_string(), k, d), v);
    }
    let mut out = Vec::with_capacity(tickers.len());
    for tk in tickers {
        let mut m = DMatrix::zeros(dates.len(), kinds);
        for k in 0..kinds {
            for (t, d) in dates.iter().enumerate() {
                m[(t, k)] = *cells.get(&(tk.clone(), k, *d)).ok_or_else(|| {
                    CliError::config(format!("{}: no signal {k} for {tk} on {d}", path.display()))
                })?;
            }
        }
        out.push(m);
    }
    Ok(out)
}
